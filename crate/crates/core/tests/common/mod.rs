#![allow(dead_code)]

use cae_core::cae::{CaeConfig, CaeModel, Ensemble, ScaleSet, Tradeoff};
use cae_core::coder;
use cae_core::image::RgbImage;
use cae_core::nn::{Normalization, SurrogateMode};
use cae_core::{synth, Rng, Tensor};

pub fn tiny_config(code_channels: usize) -> CaeConfig {
    CaeConfig {
        base_filters: 4,
        residual_blocks: 1,
        code_channels,
        surrogate: SurrogateMode::RoundSte,
    }
}

pub fn noise_image(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = Rng::new(seed);
    let data = (0..width * height * 3).map(|_| rng.below(256) as u8).collect();
    RgbImage::new(width, height, data).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Two untrained models with fitted coding tables; model 0 carries a second
/// scale set so interpolated settings exist.
pub fn tiny_ensemble() -> Ensemble {
    let train = synth::corpus(4, 32, 32, 11);
    let norm = Normalization::fit(train.iter().map(RgbImage::to_tensor).collect::<Vec<_>>().iter()).unwrap();
    let mut a = CaeModel::new(tiny_config(4), norm.clone(), Tradeoff::Alpha(0.05), 1).unwrap();
    a.id = 0;
    let mut shifted = a.active_scales().clone();
    for v in &mut shifted.log_scales {
        *v -= 0.7;
    }
    shifted.label = 0.1;
    a.add_scale_set(shifted).unwrap();
    let mut b = CaeModel::new(tiny_config(3), norm, Tradeoff::Alpha(0.2), 2).unwrap();
    b.id = 1;
    b.add_scale_set(ScaleSet::unit(3, 0.4)).unwrap();
    for m in [&mut a, &mut b] {
        coder::fit_all_histograms(m, &train).unwrap();
    }
    Ensemble::new(vec![a, b]).unwrap()
}
