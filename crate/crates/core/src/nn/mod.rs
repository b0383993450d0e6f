//! Network building blocks: convolutions, sub-pixel reshuffling,
//! activations, pixel normalization and quantization surrogates.

mod conv;
mod quantize;

pub use conv::{reflect, ConvSpec, Padding};
pub use quantize::{quantize_surrogate, round_half_away, uniform_noise, SurrogateMode};

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Contributions, Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `(C·r², H, W) → (C, rH, rW)` (depth to space).
    Up,
    /// `(C, rH, rW) → (C·r², H, W)` (space to depth).
    Down,
}

/// Source index for every output element of a depth-to-space reshuffle.
fn depth_to_space_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    // output (c, h*r, w*r); input (c*r*r, h, w)
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let (i, j) = (y % r, x % r);
                let src_c = ch * r * r + i * r + j;
                idx.push((src_c * h + y / r) * w + x / r);
            }
        }
    }
    idx
}

struct GatherOp {
    x: Var,
    src_index: Vec<usize>,
    name: &'static str,
}

impl Backward for GatherOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let mut gx = vec![0.0; ctx.value(self.x).len()];
        for (g, &i) in grad.iter().zip(&self.src_index) {
            gx[i] += g;
        }
        vec![(self.x, gx)]
    }
}

struct LeakyReluOp {
    x: Var,
    slope: f64,
}

impl Backward for LeakyReluOp {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let x = ctx.value(self.x).data();
        let g = grad
            .iter()
            .zip(x)
            .map(|(g, &x)| if x > 0.0 { *g } else { g * self.slope })
            .collect();
        vec![(self.x, g)]
    }
}

impl Tape {
    /// Sub-pixel reshuffle by factor `r`. A pure permutation.
    pub fn subpixel(&mut self, x: Var, r: usize, dir: Direction) -> Result<Var> {
        self.check(x)?;
        let (c, h, w) = self.value(x).chw()?;
        if r == 0 {
            return Err(Error::InvalidArgument("subpixel factor must be >= 1".into()));
        }
        let (shape, src_index) = match dir {
            Direction::Up => {
                if c % (r * r) != 0 {
                    return Err(Error::InvalidShape {
                        op: "subpixel up",
                        shape: vec![c, h, w],
                        reason: format!("channels not divisible by {}", r * r),
                    });
                }
                let co = c / (r * r);
                (vec![co, h * r, w * r], depth_to_space_index(co, h, w, r))
            }
            Direction::Down => {
                if h % r != 0 || w % r != 0 {
                    return Err(Error::InvalidShape {
                        op: "subpixel down",
                        shape: vec![c, h, w],
                        reason: format!("spatial dims not divisible by {r}"),
                    });
                }
                let (hs, ws) = (h / r, w / r);
                let fwd = depth_to_space_index(c, hs, ws, r);
                let mut inv = vec![0; fwd.len()];
                for (o, &i) in fwd.iter().enumerate() {
                    inv[i] = o;
                }
                (vec![c * r * r, hs, ws], inv)
            }
        };
        let src = self.value(x).data();
        let data = src_index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let name = match dir {
            Direction::Up => "subpixel_up",
            Direction::Down => "subpixel_down",
        };
        Ok(self.record(value, &[x], Box::new(GatherOp { x, src_index, name })))
    }

    /// `max(x, slope·x)` for `0 < slope < 1`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        Ok(self.record(value, &[x], Box::new(LeakyReluOp { x, slope })))
    }
}

/// Fixed per-channel pixel normalization fitted on training images.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::InvalidArgument("mean/std length mismatch".into()));
        }
        if let Some(c) = std.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "normalization std for channel {c} must be positive, got {}",
                std[c]
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and (population) standard deviation over all pixels
    /// of all `(C, H, W)` images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for img in images {
            let (c, h, w) = img.chw()?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::InvalidArgument("images differ in channel count".into()));
            }
            for (ch, plane) in img.data().chunks(h * w).enumerate() {
                sum[ch] += plane.iter().sum::<f64>();
                sq[ch] += plane.iter().map(|v| v * v).sum::<f64>();
            }
            n += h * w;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cannot fit normalization on no images".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt())
            .collect();
        Self::new(mean, std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(x − mean_c) / std_c`.
    pub fn normalize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let scale: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self.mean.iter().zip(&self.std).map(|(m, s)| -m / s).collect();
        tape.channel_affine(x, &scale, &shift)
    }

    /// `x · std_c + mean_c`.
    pub fn denormalize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.channel_affine(x, &self.std, &self.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::rng::Rng;
    use crate::tape::ForwardMode;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn subpixel_shape_law() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.subpixel(x, 2, Direction::Up).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 2, 2]);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn subpixel_inverse_pair() {
        let mut rng = Rng::new(1);
        let xv = random(&[8, 3, 5], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let up = t.subpixel(x, 2, Direction::Up).unwrap();
        assert_eq!(t.value(up).shape(), &[2, 6, 10]);
        let down = t.subpixel(up, 2, Direction::Down).unwrap();
        assert_eq!(t.value(down), &xv);

        let yv = random(&[3, 6, 9], &mut rng);
        let y = t.constant(yv.clone());
        let d = t.subpixel(y, 3, Direction::Down).unwrap();
        let u = t.subpixel(d, 3, Direction::Up).unwrap();
        assert_eq!(t.value(u), &yv);
    }

    #[test]
    fn subpixel_divisibility_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(t.subpixel(x, 2, Direction::Up).is_err());
        let y = t.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(t.subpixel(y, 2, Direction::Down).is_err());
    }

    #[test]
    fn subpixel_gradient_is_inverse_permutation() {
        let mut rng = Rng::new(2);
        let x = random(&[8, 2, 3], &mut rng);
        let err = gradcheck(
            |t, x| {
                let y = t.subpixel(x, 2, Direction::Up)?;
                let w = t.constant(Tensor::new(vec![2, 4, 6], (0..48).map(|i| i as f64).collect())?);
                let m = t.mul(y, w)?;
                t.sum(m)
            },
            &x,
            1e-3,
            ForwardMode::Exact,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn leaky_relu_values() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = t.leaky_relu(x, 0.2).unwrap();
        assert_eq!(t.value(y).data(), &[-0.2, 2.0]);
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.2, 1.0]);
    }

    #[test]
    fn normalization_inverse_and_statistics() {
        let mut rng = Rng::new(3);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| {
                let mut t = random(&[3, 8, 8], &mut rng);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 40.0 * *v + 100.0 + (i / 64) as f64 * 30.0;
                }
                t
            })
            .collect();
        let norm = Normalization::fit(&imgs).unwrap();
        let mut t = Tape::new();
        let mut normalized = Vec::new();
        for img in &imgs {
            let x = t.constant(img.clone());
            let n = norm.normalize(&mut t, x).unwrap();
            let back = norm.denormalize(&mut t, n).unwrap();
            for (a, b) in t.value(back).data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-9);
            }
            normalized.push(t.value(n).clone());
        }
        // recompute statistics after the transform
        let stats = Normalization::fit(&normalized).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-9);
            assert!((stats.std[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_std_rejected() {
        assert!(Normalization::new(vec![0.0], vec![0.0]).is_err());
        let flat = Tensor::full(&[3, 4, 4], 7.0);
        assert!(Normalization::fit([&flat]).is_err());
    }

    #[test]
    fn gradcheck_conv_leaky_relu() {
        let mut rng = Rng::new(4);
        let spec = ConvSpec::new(2, 3, 3, 1, Padding::Mirror, &mut rng).unwrap();
        let x = random(&[2, 6, 6], &mut rng);
        let err = gradcheck(
            |t, x| {
                let y = spec.forward(t, x)?;
                let a = t.leaky_relu(y, LEAKY_SLOPE)?;
                let sq = t.mul(a, a)?;
                t.sum(sq)
            },
            &x,
            1e-3,
            ForwardMode::Exact,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
