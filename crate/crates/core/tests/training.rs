//! Training-loop contracts on a tiny model.

mod common;

use cae_core::cae::{Ensemble, Tradeoff};
use cae_core::model_io::ensemble_to_bytes;
use cae_core::trainer::{self, Dataset, FinetuneConfig, TrainConfig};
use cae_core::{synth, Tensor};

fn data() -> Dataset {
    Dataset::new(synth::corpus(4, 32, 32, 6).iter().map(|i| i.to_tensor()).collect::<Vec<Tensor>>()).unwrap()
}

fn quick(max_steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps,
        batch_size: 2,
        crop_size: 16,
        window: 3,
        plateau_threshold: 0.5,
        initial_coeffs: 1,
        ..TrainConfig::desk(Tradeoff::Alpha(0.05))
    }
}

#[test]
fn identical_seeds_give_identical_traces_and_bytes() {
    let data = data();
    let run = || {
        let mut m = trainer::new_model(common::tiny_config(3), &data, Tradeoff::Alpha(0.05), 4).unwrap();
        let rep = trainer::train_incremental(&mut m, &data, &quick(30), |_| {}).unwrap();
        (rep, ensemble_to_bytes(&Ensemble::new(vec![m]).unwrap()))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn coefficients_are_only_ever_enabled() {
    let data = data();
    let mut m = trainer::new_model(common::tiny_config(4), &data, Tradeoff::Alpha(0.05), 5).unwrap();
    let mut seen = Vec::new();
    let rep = trainer::train_incremental(&mut m, &data, &quick(60), |r| seen.push(r.enabled_coeffs)).unwrap();
    assert!(!rep.enable_events.is_empty(), "threshold 0.5 should plateau quickly");
    assert!(seen.windows(2).all(|w| w[1] >= w[0]));
    assert!(rep.enable_events.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    assert_eq!(rep.masked_nonzero, 0);
    assert_eq!(m.mask.popcount(), 1 + rep.enable_events.len());
}

#[test]
fn finetuning_leaves_the_network_untouched() {
    let data = data();
    let mut m = trainer::new_model(common::tiny_config(3), &data, Tradeoff::Alpha(0.05), 6).unwrap();
    trainer::train_incremental(&mut m, &data, &quick(10), |_| {}).unwrap();
    let before = ensemble_to_bytes(&Ensemble::new(vec![m.clone()]).unwrap());
    let cfg = FinetuneConfig {
        iterations: 5,
        batch_size: 2,
        crop_size: 16,
        ..FinetuneConfig::desk()
    };
    let set = trainer::finetune_scales(&m, &data, Tradeoff::Alpha(0.2), &cfg).unwrap();
    assert_eq!(ensemble_to_bytes(&Ensemble::new(vec![m.clone()]).unwrap()), before);
    assert_ne!(set.log_scales, m.active_scales().log_scales);
    assert_eq!(set.label, 0.2);
}

#[test]
fn non_finite_gradients_never_reach_parameters() {
    let mut adam = trainer::AdamState::new(&[2]);
    let mut p = Tensor::from_vec(vec![1.0, 2.0]);
    assert!(adam.step(&mut [&mut p], &[&[f64::NAN, 0.0]], 0.1).is_err());
    assert_eq!(p.data(), &[1.0, 2.0]);
    assert_eq!(adam.steps(), 0);
}
