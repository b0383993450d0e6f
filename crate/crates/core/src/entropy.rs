//! Gaussian scale mixture rate model.
//!
//! Each coefficient channel `k` has an independent zero-mean mixture
//! `q_k(v) = Σ_s π_ks N(v; 0, σ_ks²)`, parametrized by log-weights
//! (softmax-normalized) and log-precisions so that plain gradient steps keep
//! it valid.
//!
//! Two rates are derived from it:
//!
//! * the differentiable bound `−log₂ q(z + u)` with `u ~ U[-.5, .5)`,
//!   whose expectation over `u` upper-bounds the code length (Jensen);
//! * the exact discretized code length `−log₂ Q(z)` where
//!   `Q_k(z) = ∫ q_k(z + u) du` over the unit interval, evaluated with the
//!   Gaussian CDF.

use std::f64::consts::{LN_2, PI, SQRT_2};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Backward, BackwardCtx, Contributions, Tape, Var};
use crate::tensor::Tensor;

pub const GSM_SCALES: usize = 6;

/// Initial component standard deviations.
pub const INIT_SIGMAS: [f64; GSM_SCALES] = [0.1, 0.35, 1.0, 3.5, 10.0, 35.0];

/// Densities are floored at `2^LOG2_DENSITY_FLOOR` before taking logs.
pub const LOG2_DENSITY_FLOOR: f64 = -100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GsmModel {
    /// `(K, S)`
    pub log_weights: Tensor,
    /// `(K, S)`, precision = 1/σ²
    pub log_precisions: Tensor,
}

impl GsmModel {
    /// Uniform weights over the [`INIT_SIGMAS`] ladder for every channel.
    pub fn new(channels: usize) -> Self {
        let lp: Vec<f64> = (0..channels)
            .flat_map(|_| INIT_SIGMAS.iter().map(|s| -2.0 * s.ln()))
            .collect();
        Self {
            log_weights: Tensor::zeros(&[channels, GSM_SCALES]),
            log_precisions: Tensor::new(vec![channels, GSM_SCALES], lp).expect("shape"),
        }
    }

    pub fn from_params(log_weights: Tensor, log_precisions: Tensor) -> Result<Self> {
        log_weights.check_same_shape(&log_precisions, "gsm params")?;
        if log_weights.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "gsm params",
                shape: log_weights.shape().to_vec(),
                reason: "expected (channels, scales)".into(),
            });
        }
        Ok(Self {
            log_weights,
            log_precisions,
        })
    }

    /// Mixture with the given weights and standard deviations on every
    /// channel.
    pub fn with_components(channels: usize, weights: &[f64], sigmas: &[f64]) -> Result<Self> {
        if weights.len() != sigmas.len() || weights.is_empty() {
            return Err(Error::InvalidArgument("weights/sigmas length mismatch".into()));
        }
        let s = weights.len();
        let lw = (0..channels).flat_map(|_| weights.iter().map(|w| w.ln())).collect();
        let lp = (0..channels).flat_map(|_| sigmas.iter().map(|s| -2.0 * s.ln())).collect();
        Self::from_params(
            Tensor::new(vec![channels, s], lw)?,
            Tensor::new(vec![channels, s], lp)?,
        )
    }

    pub fn channels(&self) -> usize {
        self.log_weights.shape()[0]
    }

    pub fn scales(&self) -> usize {
        self.log_weights.shape()[1]
    }

    /// Softmax-normalized mixture weights of channel `k`.
    pub fn weights(&self, k: usize) -> Vec<f64> {
        let s = self.scales();
        softmax(&self.log_weights.data()[k * s..(k + 1) * s])
    }

    pub fn sigmas(&self, k: usize) -> Vec<f64> {
        let s = self.scales();
        self.log_precisions.data()[k * s..(k + 1) * s]
            .iter()
            .map(|lp| (-0.5 * lp).exp())
            .collect()
    }

    fn check_channels(&self, v: &Tensor) -> Result<usize> {
        let k = self.channels();
        if v.shape()[0] != k {
            return Err(Error::ShapeMismatch {
                op: "gsm",
                left: v.shape().to_vec(),
                right: self.log_weights.shape().to_vec(),
            });
        }
        Ok(v.len() / k)
    }

    /// `Σ log₂ q_k(v)` over all elements of `v` (first dim = channel).
    pub fn log2_density(&self, v: &Tensor) -> Result<f64> {
        let per = self.check_channels(v)?;
        let s = self.scales();
        let mut total = 0.0;
        for (k, chunk) in v.data().chunks(per).enumerate() {
            let comps = Components::new(
                &self.log_weights.data()[k * s..(k + 1) * s],
                &self.log_precisions.data()[k * s..(k + 1) * s],
            );
            total += chunk.iter().map(|&x| comps.ln_density(x).0).sum::<f64>();
        }
        Ok(total / LN_2)
    }

    /// One-sample estimate of the rate bound, `−log₂ q(z + u)`.
    pub fn rate_upper_bound_estimate(&self, z: &Tensor, rng: &mut Rng) -> Result<f64> {
        let mut zu = z.clone();
        for v in zu.data_mut() {
            *v += rng.uniform() - 0.5;
        }
        Ok(-self.log2_density(&zu)?)
    }

    /// Discretized probability `Q_k(z)` of integer `z` under channel `k`.
    pub fn pmf(&self, k: usize, z: f64) -> f64 {
        let w = self.weights(k);
        let sig = self.sigmas(k);
        w.iter()
            .zip(&sig)
            .map(|(w, s)| w * normal_interval(z - 0.5, z + 0.5, *s))
            .sum()
    }

    /// Exact `−log₂ Q(z)` in bits. Returns `+∞` (and logs a warning) when
    /// some symbol's probability underflows to zero.
    pub fn exact_code_bits(&self, z: &Tensor) -> Result<f64> {
        let per = self.check_channels(z)?;
        let mut bits = 0.0;
        for (k, chunk) in z.data().chunks(per).enumerate() {
            let w = self.weights(k);
            let sig = self.sigmas(k);
            for &zi in chunk {
                let q: f64 = w
                    .iter()
                    .zip(&sig)
                    .map(|(w, s)| w * normal_interval(zi - 0.5, zi + 0.5, *s))
                    .sum();
                if q <= 0.0 {
                    log::warn!("probability underflow for symbol {zi} in channel {k}");
                    return Ok(f64::INFINITY);
                }
                bits -= q.log2();
            }
        }
        Ok(bits)
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `P(lo < X < hi)` for `X ~ N(0, σ²)`, computed from the tail closest to
/// zero to avoid cancellation.
fn normal_interval(lo: f64, hi: f64, sigma: f64) -> f64 {
    let a = lo / (sigma * SQRT_2);
    let b = hi / (sigma * SQRT_2);
    let p = if a >= 0.0 {
        0.5 * (libm::erfc(a) - libm::erfc(b))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b) - libm::erfc(-a))
    } else {
        1.0 - 0.5 * libm::erfc(b) - 0.5 * libm::erfc(-a)
    };
    p.max(0.0)
}

/// Per-channel mixture terms: `ln π_s + ½ ln p_s − ½ ln 2π` and `p_s`.
struct Components {
    offset: Vec<f64>,
    precision: Vec<f64>,
}

impl Components {
    fn new(log_weights: &[f64], log_precisions: &[f64]) -> Self {
        let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + log_weights.iter().map(|w| (w - m).exp()).sum::<f64>().ln();
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let offset = log_weights
            .iter()
            .zip(log_precisions)
            .map(|(w, p)| w - lse + 0.5 * p - half_ln_2pi)
            .collect();
        let precision = log_precisions.iter().map(|p| p.exp()).collect();
        Self { offset, precision }
    }

    /// Natural-log density at `x` and whether the floor was hit.
    fn ln_density(&self, x: f64) -> (f64, bool) {
        let x2 = x * x;
        let mut m = f64::NEG_INFINITY;
        for (o, p) in self.offset.iter().zip(&self.precision) {
            m = m.max(o - 0.5 * p * x2);
        }
        let s: f64 = self
            .offset
            .iter()
            .zip(&self.precision)
            .map(|(o, p)| (o - 0.5 * p * x2 - m).exp())
            .sum();
        let l = m + s.ln();
        let floor = LOG2_DENSITY_FLOOR * LN_2;
        if l < floor || !l.is_finite() {
            (floor, true)
        } else {
            (l, false)
        }
    }
}

struct GsmLog2DensityOp {
    v: Var,
    log_weights: Var,
    log_precisions: Var,
}

impl Backward for GsmLog2DensityOp {
    fn name(&self) -> &'static str {
        "gsm_log2_density"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let g = grad[0] / LN_2;
        let v = ctx.value(self.v);
        let lw = ctx.value(self.log_weights);
        let lp = ctx.value(self.log_precisions);
        let (k_n, s_n) = (lw.shape()[0], lw.shape()[1]);
        let per = v.len() / k_n;
        let mut gv = vec![0.0; v.len()];
        let mut glw = vec![0.0; k_n * s_n];
        let mut glp = vec![0.0; k_n * s_n];
        let mut resp = vec![0.0; s_n];
        for k in 0..k_n {
            let lwk = &lw.data()[k * s_n..(k + 1) * s_n];
            let comps = Components::new(lwk, &lp.data()[k * s_n..(k + 1) * s_n]);
            let pi = softmax(lwk);
            for i in k * per..(k + 1) * per {
                let x = v.data()[i];
                let (l, floored) = comps.ln_density(x);
                if floored {
                    continue;
                }
                let x2 = x * x;
                let mut dx = 0.0;
                for s in 0..s_n {
                    let p = comps.precision[s];
                    resp[s] = (comps.offset[s] - 0.5 * p * x2 - l).exp();
                    dx -= resp[s] * p * x;
                    glp[k * s_n + s] += g * resp[s] * (0.5 - 0.5 * p * x2);
                    glw[k * s_n + s] += g * (resp[s] - pi[s]);
                }
                gv[i] = g * dx;
            }
        }
        let mut out = Vec::with_capacity(3);
        if ctx.tracked(self.v) {
            out.push((self.v, gv));
        }
        if ctx.tracked(self.log_weights) {
            out.push((self.log_weights, glw));
        }
        if ctx.tracked(self.log_precisions) {
            out.push((self.log_precisions, glp));
        }
        out
    }
}

impl Tape {
    /// Differentiable `Σ log₂ q(v)` with mixture parameters supplied as
    /// `(K, S)` tape variables.
    pub fn gsm_log2_density(&mut self, v: Var, log_weights: Var, log_precisions: Var) -> Result<Var> {
        self.check(v)?;
        self.check(log_weights)?;
        self.check(log_precisions)?;
        let model = GsmModel::from_params(
            self.value(log_weights).clone(),
            self.value(log_precisions).clone(),
        )?;
        let total = model.log2_density(self.value(v))?;
        Ok(self.record(
            Tensor::scalar(total),
            &[v, log_weights, log_precisions],
            Box::new(GsmLog2DensityOp {
                v,
                log_weights,
                log_precisions,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_many, Coords};
    use crate::tape::ForwardMode;

    #[test]
    fn standard_normal_at_zero() {
        let m = GsmModel::with_components(1, &[1.0], &[1.0]).unwrap();
        let v = m.log2_density(&Tensor::from_vec(vec![0.0])).unwrap();
        let expect = -0.5 * (2.0 * PI).log2();
        assert!((v - expect).abs() < 1e-12);
        assert!((v + 1.32575).abs() < 1e-5);
    }

    #[test]
    fn symmetric_density() {
        let m = GsmModel::new(2);
        for x in [0.3, 1.7, 12.0] {
            let a = m.log2_density(&Tensor::from_vec(vec![x, -x])).unwrap();
            let b = m.log2_density(&Tensor::from_vec(vec![-x, x])).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_components_collapse() {
        let one = GsmModel::with_components(1, &[1.0], &[2.0]).unwrap();
        let two = GsmModel::with_components(1, &[0.5, 0.5], &[2.0, 2.0]).unwrap();
        for x in [0.0, 0.7, -3.3] {
            let t = Tensor::from_vec(vec![x]);
            assert!((one.log2_density(&t).unwrap() - two.log2_density(&t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_gaussian_code_bits() {
        let m = GsmModel::with_components(1, &[1.0], &[1.0]).unwrap();
        let q0 = m.pmf(0, 0.0);
        // Φ(.5) − Φ(−.5) = erf(.5/√2)
        let expect = libm::erf(0.5 / SQRT_2);
        assert!((q0 - expect).abs() < 1e-15);
        assert!((q0 - 0.382925).abs() < 1e-6);
        let bits = m.exact_code_bits(&Tensor::from_vec(vec![0.0])).unwrap();
        // −log₂ 0.3829249 = 1.384866...
        assert!((bits + expect.log2()).abs() < 1e-12);
        assert!((bits - 1.38487).abs() < 1e-5, "{bits}");
    }

    #[test]
    fn degenerate_mixture_costs_nothing_at_zero() {
        let m = GsmModel::with_components(1, &[1.0], &[1e-12]).unwrap();
        let bits = m.exact_code_bits(&Tensor::from_vec(vec![0.0])).unwrap();
        assert!(bits.abs() < 1e-12);
    }

    #[test]
    fn underflow_reports_infinity() {
        let m = GsmModel::with_components(1, &[1.0], &[1e-3]).unwrap();
        let bits = m.exact_code_bits(&Tensor::from_vec(vec![1000.0])).unwrap();
        assert!(bits.is_infinite());
    }

    #[test]
    fn pmf_normalizes_and_tails_decrease() {
        let mut rng = Rng::new(5);
        for _ in 0..5 {
            let w: Vec<f64> = (0..GSM_SCALES).map(|_| rng.uniform() + 0.01).collect();
            let s: Vec<f64> = (0..GSM_SCALES).map(|_| 0.05 + 5.0 * rng.uniform()).collect();
            let m = GsmModel::with_components(1, &w, &s).unwrap();
            let smax = s.iter().copied().fold(0.0, f64::max);
            let r = (40.0 * smax).ceil() as i64;
            let total: f64 = (-r..=r).map(|z| m.pmf(0, z as f64)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{total}");
            for z in 0..r {
                assert!(m.pmf(0, (z + 1) as f64) <= m.pmf(0, z as f64));
            }
        }
    }

    #[test]
    fn bound_is_additive_over_dimensions() {
        let m = GsmModel::new(1);
        let z = Tensor::new(vec![1, 3], vec![0.0, 3.0, -1.0]).unwrap();
        let mut r1 = Rng::new(9);
        let joint = m.rate_upper_bound_estimate(&z, &mut r1).unwrap();
        let mut r2 = Rng::new(9);
        let mut sum = 0.0;
        for &zi in z.data() {
            sum += m
                .rate_upper_bound_estimate(&Tensor::new(vec![1, 1], vec![zi]).unwrap(), &mut r2)
                .unwrap();
        }
        assert!((joint - sum).abs() < 1e-9);
    }

    #[test]
    fn single_sample_is_seed_deterministic() {
        let m = GsmModel::new(2);
        let z = Tensor::new(vec![2, 2], vec![0.0, 1.0, -2.0, 5.0]).unwrap();
        let a = m.rate_upper_bound_estimate(&z, &mut Rng::new(4)).unwrap();
        let b = m.rate_upper_bound_estimate(&z, &mut Rng::new(4)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradcheck_against_finite_differences() {
        let mut rng = Rng::new(6);
        let k = 2;
        let v = Tensor::new(vec![k, 2, 3], (0..12).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let lw = Tensor::new(vec![k, GSM_SCALES], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let lp = Tensor::new(vec![k, GSM_SCALES], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let err = gradcheck_many(
            |t, x| t.gsm_log2_density(x[0], x[1], x[2]),
            &[v, lw, lp],
            1e-3,
            ForwardMode::Exact,
            Coords::All,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn channel_mismatch_errors() {
        let m = GsmModel::new(3);
        assert!(m.log2_density(&Tensor::zeros(&[2, 4])).is_err());
    }
}
