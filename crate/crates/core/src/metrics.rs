//! Image quality metrics: MSE, PSNR, SSIM and MS-SSIM.
//!
//! SSIM and MS-SSIM are computed on luma (`0.299 R + 0.587 G + 0.114 B`)
//! with an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
//! `L = 255`. Local statistics are only taken where the window fits
//! entirely inside the image ("valid" windows) and averaged.

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Published per-scale MS-SSIM exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: vec![a.height(), a.width()],
            right: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// `10 log10(255² / mse)`; `f64::INFINITY` for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Single-channel image of reals.
#[derive(Clone, Debug, PartialEq)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

fn luma(img: &RgbImage) -> Plane {
    let v = img
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect();
    Plane {
        w: img.width(),
        h: img.height(),
        v,
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, x) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *x = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|x| x / s)
}

/// Separable valid-mode filtering with the Gaussian window.
fn filter_valid(p: &Plane, g: &[f64; WINDOW]) -> Plane {
    let ow = p.w - WINDOW + 1;
    let oh = p.h - WINDOW + 1;
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v: out }
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect(),
    }
}

/// Mean SSIM and mean contrast-structure term.
fn ssim_terms(a: &Plane, b: &Plane) -> Result<(f64, f64)> {
    if a.w < WINDOW || a.h < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {WINDOW}x{WINDOW} window",
            a.w, a.h
        )));
    }
    let g = gaussian_window();
    let mu_a = filter_valid(a, &g);
    let mu_b = filter_valid(b, &g);
    let aa = filter_valid(&product(a, a), &g);
    let bb = filter_valid(&product(b, b), &g);
    let ab = filter_valid(&product(a, b), &g);
    let n = mu_a.v.len();
    let (mut s, mut c) = (0.0, 0.0);
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        s += l * cs;
        c += cs;
    }
    Ok((s / n as f64, c / n as f64))
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    Ok(ssim_terms(&luma(a), &luma(b))?.0)
}

/// 2×2 box average with stride 2; an odd last row/column is dropped.
fn downsample(p: &Plane) -> Plane {
    let (w, h) = (p.w / 2, p.h / 2);
    let mut v = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = 2 * y * p.w + 2 * x;
            v[y * w + x] = 0.25 * (p.v[i] + p.v[i + 1] + p.v[i + p.w] + p.v[i + p.w + 1]);
        }
    }
    Plane { w, h, v }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    /// Number of scales actually used.
    pub scales: usize,
}

impl MsSsim {
    /// Fewer than the standard five scales were possible.
    pub fn reduced(&self) -> bool {
        self.scales < MS_SSIM_WEIGHTS.len()
    }
}

/// Multi-scale SSIM. Uses as many of the five scales as fit the image (the
/// coarsest scale must still hold one full window); with fewer scales the
/// leading exponents are renormalized to sum to one. Negative contrast terms
/// are clamped to zero before exponentiation.
pub fn ms_ssim(a: &RgbImage, b: &RgbImage) -> Result<MsSsim> {
    check_same(a, b)?;
    let min_dim = a.width().min(a.height());
    let mut scales = 0;
    while scales < MS_SSIM_WEIGHTS.len() && (min_dim >> scales) >= WINDOW {
        scales += 1;
    }
    if scales == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} too small for MS-SSIM",
            a.width(),
            a.height()
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let norm = if scales == MS_SSIM_WEIGHTS.len() {
        1.0
    } else {
        weights.iter().sum()
    };
    let (mut pa, mut pb) = (luma(a), luma(b));
    let mut value = 1.0;
    for (j, &w) in weights.iter().enumerate() {
        let (s, cs) = ssim_terms(&pa, &pb)?;
        let term = if j + 1 == scales { s } else { cs };
        value *= term.max(0.0).powf(w / norm);
        if j + 1 < scales {
            pa = downsample(&pa);
            pb = downsample(&pb);
        }
    }
    Ok(MsSsim { value, scales })
}

/// One rate–distortion measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub image: String,
    pub codec: String,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub ms_ssim_scales: usize,
}

impl RdPoint {
    pub const CSV_HEADER: &'static str = "image,codec,bpp,mse,psnr,ssim,ms_ssim,ms_ssim_scales";

    pub fn measure(image: &str, codec: &str, bpp: f64, original: &RgbImage, decoded: &RgbImage) -> Result<Self> {
        let m = mse(original, decoded)?;
        let ms = ms_ssim(original, decoded)?;
        Ok(Self {
            image: image.into(),
            codec: codec.into(),
            bpp,
            mse: m,
            psnr: psnr_from_mse(m),
            ssim: ssim(original, decoded)?,
            ms_ssim: ms.value,
            ms_ssim_scales: ms.scales,
        })
    }

    /// CSV row; an infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.image, self.codec, self.bpp, self.mse, self.psnr, self.ssim, self.ms_ssim, self.ms_ssim_scales
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::synth::texture;

    fn noisy(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
        let mut rng = Rng::new(seed);
        let d = img
            .data()
            .iter()
            .map(|&v| (f64::from(v) + sigma * rng.normal()).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::new(img.width(), img.height(), d).unwrap()
    }

    fn flat(w: usize, h: usize, v: u8) -> RgbImage {
        RgbImage::new(w, h, vec![v; 3 * w * h]).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = flat(8, 8, 100);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &flat(8, 8, 105)).unwrap() - (10.0 * (65025.0f64 / 25.0).log10())).abs() < 1e-9);
        assert!((psnr(&a, &flat(8, 8, 105)).unwrap() - 34.1514).abs() < 1e-4);
        assert!((psnr_from_mse(1.0) - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((psnr_from_mse(1.0) - 48.1308).abs() < 1e-4);
        assert!(psnr(&a, &flat(8, 9, 100)).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = texture(48, 40, 1, 0);
        let b = noisy(&a, 10.0, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&flat(10, 20, 0), &flat(10, 20, 0)).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // zero variance: only the luminance term remains
        let a = flat(16, 16, 100);
        let b = flat(16, 16, 120);
        let l = (2.0 * 100.0 * 120.0 + C1) / (100.0f64.powi(2) + 120.0f64.powi(2) + C1);
        assert!((ssim(&a, &b).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_exponents() {
        let s: f64 = MS_SSIM_WEIGHTS.iter().sum();
        assert!((s - 1.0001).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_scale_selection() {
        let a = texture(64, 64, 3, 0);
        let r = ms_ssim(&a, &a).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        assert_eq!(r.scales, 3);
        assert!(r.reduced());
        let big = texture(176, 180, 3, 1);
        let r = ms_ssim(&big, &noisy(&big, 5.0, 1)).unwrap();
        assert_eq!(r.scales, 5);
        assert!(!r.reduced());
        assert!(ms_ssim(&flat(10, 10, 0), &flat(10, 10, 0)).is_err());
    }

    #[test]
    fn noise_sweep_monotone() {
        let a = texture(64, 64, 5, 0);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for sigma in [2.0, 5.0, 10.0, 20.0] {
            let b = noisy(&a, sigma, 9);
            let s = ssim(&a, &b).unwrap();
            let m = ms_ssim(&a, &b).unwrap().value;
            assert!(s < prev.0 && m < prev.1, "sigma {sigma}: {s} {m}");
            prev = (s, m);
        }
    }
}
