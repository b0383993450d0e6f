//! Property tests for the tape and the network building blocks.

mod common;

use cae_core::gradcheck::{gradcheck_many, Coords};
use cae_core::nn::{quantize_surrogate, round_half_away, ConvSpec, Direction, Padding, SurrogateMode};
use cae_core::{ForwardMode, Rng, Tape, Tensor};
use common::random_tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_programs_match_finite_differences(seed in 0u64..10_000, n in 1usize..12) {
        let x = random_tensor(&[n], seed, -2.0, 2.0);
        let y = random_tensor(&[n], seed + 1, -2.0, 2.0);
        let err = gradcheck_many(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                let e = t.exp(v[0])?;
                let s = t.add(p, e)?;
                let q = t.sq_err_sum(s, v[1])?;
                let m = t.mean(p)?;
                t.add(q, m)
            },
            &[x, y],
            1e-3,
            ForwardMode::Exact,
            Coords::All,
        )
        .unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn backward_is_idempotent_after_reset(seed in 0u64..10_000) {
        let mut t = Tape::new();
        let x = t.param(random_tensor(&[2, 3, 4], seed, -1.0, 1.0));
        let w = t.param(random_tensor(&[3, 2, 3, 3], seed + 7, -1.0, 1.0));
        let c = t.conv2d(x, w, None, 1, 1).unwrap();
        let a = t.leaky_relu(c, 0.2).unwrap();
        let fan = t.mul(a, c).unwrap();
        let loss = t.sum(fan).unwrap();
        t.backward(loss).unwrap();
        let first = (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec());
        t.zero_grad();
        t.backward(loss).unwrap();
        prop_assert_eq!(t.grad(x).unwrap(), &first.0[..]);
        prop_assert_eq!(t.grad(w).unwrap(), &first.1[..]);
        // without a reset, leaf gradients add up
        t.backward(loss).unwrap();
        for (g, g0) in t.grad(x).unwrap().iter().zip(&first.0) {
            prop_assert_eq!(*g, 2.0 * g0);
        }
    }

    #[test]
    fn hard_quantizers_emit_integers(seed in 0u64..10_000, n in 1usize..64) {
        let x = random_tensor(&[n], seed, -50.0, 50.0);
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let mut rng = Rng::new(seed);
        for mode in [SurrogateMode::RoundSte, SurrogateMode::StochasticRound] {
            let q = quantize_surrogate(&mut t, v, mode, &mut rng).unwrap();
            for (&o, &i) in t.value(q).data().iter().zip(x.data()) {
                prop_assert_eq!(o, o.round());
                prop_assert!((o - i).abs() < 1.0);
            }
        }
    }

    #[test]
    fn straight_through_forward_is_plain_rounding(seed in 0u64..10_000, n in 1usize..64) {
        let mut x = random_tensor(&[n], seed, -20.0, 20.0);
        // include exact ties
        x.data_mut()[0] = (x.data()[0].trunc()) + 0.5;
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let q = t.round_ste(v).unwrap();
        for (&o, &i) in t.value(q).data().iter().zip(x.data()) {
            prop_assert_eq!(o, round_half_away(i));
            prop_assert_eq!(o, i.round());
        }
    }

    #[test]
    fn subpixel_up_and_down_are_inverse(c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4, seed in 0u64..1000) {
        let mut t = Tape::new();
        let x = t.constant(random_tensor(&[c * r * r, h, w], seed, -1.0, 1.0));
        let up = t.subpixel(x, r, Direction::Up).unwrap();
        prop_assert_eq!(t.value(up).shape(), &[c, h * r, w * r][..]);
        let back = t.subpixel(up, r, Direction::Down).unwrap();
        prop_assert_eq!(t.value(back), t.value(x));

        let y = t.constant(random_tensor(&[c, h * r, w * r], seed + 1, -1.0, 1.0));
        let down = t.subpixel(y, r, Direction::Down).unwrap();
        let again = t.subpixel(down, r, Direction::Up).unwrap();
        prop_assert_eq!(t.value(again), t.value(y));
    }

    #[test]
    fn mirror_padding_is_symmetric(h in 2usize..7, w in 2usize..7, pad in 0usize..4, seed in 0u64..1000) {
        let mut t = Tape::new();
        let x = t.constant(random_tensor(&[1, h, w], seed, -1.0, 1.0));
        let p = t.mirror_pad(x, pad).unwrap();
        let out = t.value(p).clone();
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        prop_assert_eq!(out.shape(), &[1, ph, pw][..]);
        let at = |r: usize, c: usize| out.data()[r * pw + c];
        // reflection about the first and last original sample, edge not repeated
        for i in 1..=pad.min(h - 1) {
            for c in 0..pw {
                prop_assert_eq!(at(pad - i, c), at(pad + i, c));
                prop_assert_eq!(at(pad + h - 1 + i, c), at(pad + h - 1 - i, c));
            }
        }
        for i in 1..=pad.min(w - 1) {
            for r in 0..ph {
                prop_assert_eq!(at(r, pad - i), at(r, pad + i));
            }
        }
    }

    #[test]
    fn mirror_conv_of_constant_field_is_constant(k in prop::sample::select(vec![3usize, 5]), stride in 1usize..3, v in -3.0f64..3.0, seed in 0u64..1000) {
        let spec = ConvSpec::new(2, 3, k, stride, Padding::Mirror, &mut Rng::new(seed)).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 6, 6], v));
        let y = spec.forward(&mut t, x).unwrap();
        let per_out = 2 * k * k;
        for (o, plane) in t.value(y).data().chunks(t.value(y).len() / 3).enumerate() {
            let want = v * spec.weight.data()[o * per_out..(o + 1) * per_out].iter().sum::<f64>() + spec.bias.data()[o];
            for &p in plane {
                prop_assert!((p - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn training_step_is_bit_reproducible() {
    use cae_core::cae::{CaeModel, Tradeoff};
    use cae_core::trainer::{self, Dataset, TrainConfig};
    let imgs: Vec<Tensor> = cae_core::synth::corpus(3, 32, 32, 4).iter().map(|i| i.to_tensor()).collect();
    let data = Dataset::new(imgs).unwrap();
    let run = || -> (Vec<f64>, Vec<Tensor>) {
        let mut m: CaeModel = trainer::new_model(common::tiny_config(3), &data, Tradeoff::Alpha(0.05), 9).unwrap();
        let cfg = TrainConfig {
            max_steps: 3,
            batch_size: 2,
            crop_size: 16,
            ..TrainConfig::desk(Tradeoff::Alpha(0.05))
        };
        let rep = trainer::train_incremental(&mut m, &data, &cfg, |_| {}).unwrap();
        (rep.trace.iter().map(|r| r.loss).collect(), m.params().into_iter().cloned().collect())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
}
