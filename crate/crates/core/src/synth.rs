//! Seeded synthetic texture images: smooth random fields plus oriented
//! gratings confined to random regions.

use std::f64::consts::PI;

use crate::image::RgbImage;
use crate::rng::{streams, Rng};

/// Bilinear upsampling of an i.i.d. Gaussian grid with `cell`-pixel spacing.
fn smooth_field(rng: &mut Rng, width: usize, height: usize, cell: usize) -> Vec<f64> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.normal()).collect();
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            out[y * width + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Image `index` of the corpus generated from `seed`.
pub fn texture(width: usize, height: usize, seed: u64, index: u64) -> RgbImage {
    let mut rng = Rng::with_stream(seed, (index << 8) | streams::DATA);
    let n = width * height;
    let mut lum = vec![0.0; n];

    let coarse = smooth_field(&mut rng, width, height, 16);
    let fine = smooth_field(&mut rng, width, height, 4);
    for i in 0..n {
        lum[i] = 35.0 * coarse[i] + 12.0 * fine[i];
    }

    let gratings = 2 + rng.below(3);
    for _ in 0..gratings {
        let theta = rng.uniform_in(0.0, PI);
        let freq = rng.uniform_in(1.0 / 24.0, 1.0 / 4.0);
        let phase = rng.uniform_in(0.0, 2.0 * PI);
        let amp = rng.uniform_in(10.0, 40.0);
        let region = smooth_field(&mut rng, width, height, 24);
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let gate = 1.0 / (1.0 + (-3.0 * region[i]).exp());
                let t = 2.0 * PI * freq * (x as f64 * c + y as f64 * s) + phase;
                lum[i] += amp * gate * t.cos();
            }
        }
    }

    let base = rng.uniform_in(80.0, 170.0);
    let tint: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.8, 1.2)).collect();
    let chroma: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(&mut rng, width, height, 32)).collect();
    let mut data = vec![0u8; 3 * n];
    for i in 0..n {
        for ch in 0..3 {
            let v = base + tint[ch] * lum[i] + 15.0 * chroma[ch][i] + 2.0 * rng.normal();
            data[3 * i + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RgbImage::new(width, height, data).expect("consistent size")
}

pub fn corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<RgbImage> {
    (0..count as u64).map(|i| texture(width, height, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = texture(32, 24, 7, 0);
        assert_eq!(a, texture(32, 24, 7, 0));
        assert_ne!(a, texture(32, 24, 7, 1));
        assert_ne!(a, texture(32, 24, 8, 0));
        assert_eq!((a.width(), a.height()), (32, 24));
    }

    #[test]
    fn has_contrast() {
        let img = texture(64, 64, 1, 0);
        let d = img.data();
        let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(var.sqrt() > 10.0, "std {}", var.sqrt());
    }
}
