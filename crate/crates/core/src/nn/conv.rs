//! 2-D convolution (cross-correlation) over single `(C, H, W)` images.
//!
//! Implemented as im2col followed by a dense matrix product. The column
//! buffer is kept on the tape for the backward pass.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Backward, BackwardCtx, Contributions, Tape, Var};
use crate::tensor::Tensor;

/// Border handling of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Reflect `⌊K/2⌋` samples per side, then a valid convolution.
    Mirror,
    /// Zero-pad `⌊K/2⌋` samples per side.
    Zero,
}

/// Shape and parameters of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `(out, in, K, K)`
    pub weight: Tensor,
    /// `(out,)`
    pub bias: Tensor,
}

impl ConvSpec {
    /// Layer with weights drawn uniformly in `±sqrt(6 / ((1 + a²) fan_in))`
    /// for leaky slope `a`, and zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv layer {in_channels}->{out_channels} k={kernel} stride={stride}"
            )));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let slope = super::LEAKY_SLOPE;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let w: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?,
            bias: Tensor::zeros(&[out_channels]),
        })
    }

    /// Padding per side, `⌊K/2⌋`.
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Output spatial extent for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        let o = |n: usize| (n + 2 * p - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    /// Apply the layer with weights and bias supplied as tape variables.
    pub fn apply(&self, tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
        match self.padding {
            Padding::Mirror => {
                let padded = tape.mirror_pad(x, self.pad())?;
                tape.conv2d(padded, weight, Some(bias), self.stride, 0)
            }
            Padding::Zero => tape.conv2d(x, weight, Some(bias), self.stride, self.pad()),
        }
    }

    /// Apply the layer with its own weights as constants.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        self.apply(tape, x, w, b)
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0; g.rows() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c = op(a) · op(b) + beta · c` on row-major buffers, where `op` optionally
/// transposes. `op(a)` is `m × k`, `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable by the given
    // dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Conv2dOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: Geometry,
    cout: usize,
    cols: Vec<f64>,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let g = &self.geom;
        let (rows, p) = (g.rows(), g.cols());
        let mut out = Vec::with_capacity(3);
        if ctx.tracked(self.w) {
            let mut gw = vec![0.0; self.cout * rows];
            gemm(self.cout, p, rows, grad, false, &self.cols, true, 0.0, &mut gw);
            out.push((self.w, gw));
        }
        if let Some(b) = self.b {
            if ctx.tracked(b) {
                let gb = grad.chunks(p).map(|r| r.iter().sum()).collect();
                out.push((b, gb));
            }
        }
        if ctx.tracked(self.x) {
            let w = ctx.value(self.w).data();
            let mut gcols = vec![0.0; rows * p];
            gemm(rows, self.cout, p, w, true, grad, false, 0.0, &mut gcols);
            out.push((self.x, col2im(&gcols, g)));
        }
        out
    }
}

struct MirrorPadOp {
    x: Var,
    src_index: Vec<usize>,
}

impl Backward for MirrorPadOp {
    fn name(&self) -> &'static str {
        "mirror_pad"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let mut gx = vec![0.0; ctx.value(self.x).len()];
        for (g, &i) in grad.iter().zip(&self.src_index) {
            gx[i] += g;
        }
        vec![(self.x, gx)]
    }
}

/// Reflect index `i` into `0..n` without repeating the edge sample. Indices
/// more than one period away keep bouncing between the borders.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

impl Tape {
    /// Cross-correlation of `x (Cin, H, W)` with `w (Cout, Cin, K, K)` plus
    /// optional bias, zero padding `pad` per side.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let (cin, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.value(x).shape().to_vec(),
                right: ws,
            });
        }
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: ws,
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: vec![cin, h, wd],
                reason: format!("zero-size output for kernel {k} with padding {pad}"),
            });
        }
        let geom = Geometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.cols();
        let mut out = vec![0.0; cout * p];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(p).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        gemm(
            cout,
            geom.rows(),
            p,
            self.value(w).data(),
            false,
            &cols,
            false,
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let value = Tensor::new(vec![cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(
            value,
            &inputs,
            Box::new(Conv2dOp {
                x,
                w,
                b,
                geom,
                cout,
                cols,
            }),
        ))
    }

    /// Reflect-pad both spatial dims by `pad` on every side.
    pub fn mirror_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.check(x)?;
        let (c, h, w) = self.value(x).chw()?;
        if pad == 0 {
            return Ok(x);
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut src_index = Vec::with_capacity(c * hp * wp);
        for ch in 0..c {
            for y in 0..hp {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..wp {
                    let sx = reflect(xx as isize - pad as isize, w);
                    src_index.push((ch * h + sy) * w + sx);
                }
            }
        }
        let src = self.value(x).data();
        let data = src_index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![c, hp, wp], data)?;
        Ok(self.record(value, &[x], Box::new(MirrorPadOp { x, src_index })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_many;
    use crate::gradcheck::Coords;
    use crate::tape::ForwardMode;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (cin, h, wd) = x.chw().unwrap();
        let s = w.shape();
        let (cout, k) = (s[0], s[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        t3(cout, ho, wo, out)
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn sum_filter() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_stride_two_subsamples() {
        let mut rng = Rng::new(3);
        let xv = random(&[1, 6, 6], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = t.conv2d(x, w, None, 2, 0).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(out.data()[oy * 3 + ox], xv.data()[(2 * oy) * 6 + 2 * ox]);
            }
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = Rng::new(4);
        for &(cin, cout, k, stride, pad, h, w) in &[
            (3, 4, 5, 2, 0, 9, 11),
            (2, 3, 3, 1, 1, 5, 4),
            (4, 2, 3, 2, 1, 8, 8),
            (1, 1, 1, 1, 0, 3, 2),
        ] {
            let xv = random(&[cin, h, w], &mut rng);
            let wv = random(&[cout, cin, k, k], &mut rng);
            let bv: Vec<f64> = (0..cout).map(|_| rng.normal()).collect();
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let wt = t.constant(wv.clone());
            let b = t.constant(Tensor::from_vec(bv.clone()));
            let y = t.conv2d(x, wt, Some(b), stride, pad).unwrap();
            let reference = naive_conv(&xv, &wv, &bv, stride, pad);
            assert_eq!(t.value(y).shape(), reference.shape());
            for (a, r) in t.value(y).data().iter().zip(reference.data()) {
                assert!((a - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3, 3]));
        let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            t.conv2d(x, w, None, 1, 0),
            Err(Error::ShapeMismatch { .. })
        ));
        let w = t.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(
            t.conv2d(x, w, None, 1, 0),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn gradcheck_conv_with_stride_and_padding() {
        let mut rng = Rng::new(5);
        let xs = vec![
            random(&[2, 7, 6], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        let err = gradcheck_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &xs,
            1e-3,
            ForwardMode::Exact,
            Coords::All,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mirror_pad_reflects_without_repeating_edge() {
        let mut t = Tape::new();
        let x = t.constant(t3(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).reshape(vec![1, 2, 2]).unwrap());
        let y = t.mirror_pad(x, 1).unwrap();
        // [[1,2],[3,4]] padded by 1 -> rows reflect 3,4 / 1,2 / 3,4 / 1,2
        assert_eq!(
            t.value(y).data(),
            &[4.0, 3.0, 4.0, 3.0, 2.0, 1.0, 2.0, 1.0, 4.0, 3.0, 4.0, 3.0, 2.0, 1.0, 2.0, 1.0]
        );
        // wider than the input: reflection keeps bouncing
        let z = t.mirror_pad(x, 2).unwrap();
        assert_eq!(t.value(z).shape(), &[1, 6, 6]);
        assert_eq!(&t.value(z).data()[..6], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn mirror_pad_is_symmetric() {
        let mut rng = Rng::new(8);
        let mut t = Tape::new();
        let x = t.constant(random(&[1, 6, 6], &mut rng));
        let p = 2;
        let y = t.mirror_pad(x, p).unwrap();
        let v = t.value(y);
        let wp = 6 + 2 * p;
        for row in 0..wp {
            for i in 1..=p {
                // padded[-i] == padded[+i] around the first real column
                assert_eq!(v.data()[row * wp + p - i], v.data()[row * wp + p + i]);
            }
        }
    }

    #[test]
    fn mirror_conv_on_constant_field_is_constant() {
        let mut rng = Rng::new(9);
        let spec = ConvSpec::new(2, 3, 5, 2, Padding::Mirror, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 8, 8], 1.5));
        let y = spec.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y).shape(), &[3, 4, 4]);
        for co in 0..3 {
            let expect: f64 = spec.weight.data()[co * 50..(co + 1) * 50].iter().sum::<f64>() * 1.5;
            for v in &t.value(y).data()[co * 16..(co + 1) * 16] {
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradcheck_mirror_pad() {
        let mut rng = Rng::new(10);
        let xs = vec![random(&[2, 4, 5], &mut rng)];
        let err = gradcheck_many(
            |t, v| {
                let y = t.mirror_pad(v[0], 2)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &xs,
            1e-3,
            ForwardMode::Exact,
            Coords::All,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
