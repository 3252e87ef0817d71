//! Reconstruction quality metrics and the patch singular-spectrum analyzer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::solver::svd_topk;

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// SSIM window Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB: `10*log10(peak^2 / mse)`. Identical
/// images return the infinity sentinel rather than an arbitrary cap.
pub fn psnr(a: &GrayImage, b: &GrayImage, peak: f64) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / (a.height() * a.width()) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps for the SSIM window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode Gaussian filter; output is `(h-10) x (w-10)`.
fn gaussian_filter(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let taps = gaussian_taps();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * src[i * w + j + k];
            }
            rows[i * ow + j] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[(i + k) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over an 11x11 Gaussian-weighted local map
/// (sigma 1.5, peak 1, stability constants `(0.01)^2` and `(0.03)^2`).
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let av: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = av.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bv.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();

    let (mu_a, oh, ow) = gaussian_filter(&av, h, w);
    let (mu_b, _, _) = gaussian_filter(&bv, h, w);
    let (m_aa, _, _) = gaussian_filter(&aa, h, w);
    let (m_bb, _, _) = gaussian_filter(&bb, h, w);
    let (m_ab, _, _) = gaussian_filter(&ab, h, w);

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
        acc += num / den;
    }
    Ok(acc / (oh * ow) as f64)
}

/// All `min(h, w)` singular values of a patch, descending.
pub fn singular_spectrum(patch: &GrayImage) -> Result<Vec<f64>> {
    let m = patch.to_matrix::<f64>();
    let k = patch.height().min(patch.width());
    Ok(svd_topk(&m, k)?.values)
}

/// Energy captured by the top `r` values: `sum_{i<=r} s_i^2 / sum s_i^2`,
/// with the empty spectrum (or all-zero values) defined as 1.
pub fn energy_ratio(svals: &[f64], r: usize) -> f64 {
    let r = r.min(svals.len());
    let total: f64 = svals.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1.0;
    }
    let head: f64 = svals[..r].iter().map(|s| s * s).sum();
    head / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_sentinel_and_offset_values() {
        let a = random_image(16, 16, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);

        // Uniform offset 0.1: mse = 0.01, psnr = 20 dB (within f32 pixel
        // representation error).
        let a = GrayImage::constant(8, 8, 0.2).unwrap();
        let b = GrayImage::constant(8, 8, 0.3).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-6, "got {v}");

        // Exactly representable offset 0.125: psnr = 10*log10(64) exactly.
        let a = GrayImage::constant(8, 8, 0.25).unwrap();
        let b = GrayImage::constant(8, 8, 0.375).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 10.0 * 64.0f64.log10()).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn psnr_symmetric_and_decreasing_in_noise() {
        let a = random_image(24, 24, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..24 * 24).map(|_| rng.random::<f32>() - 0.5).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let b = GrayImage::new(
                24,
                24,
                a.pixels()
                    .iter()
                    .zip(&noise)
                    .map(|(&p, &n)| p + amp * n)
                    .collect(),
            )
            .unwrap();
            let fwd = psnr(&a, &b, 1.0).unwrap();
            let bwd = psnr(&b, &a, 1.0).unwrap();
            assert!((fwd - bwd).abs() < 1e-9);
            assert!(fwd < last, "psnr should fall as noise grows");
            last = fwd;
        }
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random_image(32, 32, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let b = GrayImage::new(32, 32, a.pixels().iter().map(|&v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_symmetric_and_window_guard() {
        let a = random_image(20, 40, 5);
        let b = random_image(20, 40, 6);
        let fwd = ssim(&a, &b).unwrap();
        let bwd = ssim(&b, &a).unwrap();
        assert!((fwd - bwd).abs() < 1e-9);

        let tiny = GrayImage::constant(10, 20, 0.0).unwrap();
        assert!(matches!(
            ssim(&tiny, &tiny),
            Err(Error::ImageTooSmall { window: 11, .. })
        ));
    }

    #[test]
    fn ssim_matches_direct_window_implementation() {
        // Independent route: explicit per-window loops, no separable pass.
        fn direct(a: &GrayImage, b: &GrayImage) -> f64 {
            let taps = {
                let mut t = [0.0f64; 11];
                let mut sum = 0.0;
                for (i, v) in t.iter_mut().enumerate() {
                    let d = i as f64 - 5.0;
                    *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
                    sum += *v;
                }
                for v in &mut t {
                    *v /= sum;
                }
                t
            };
            let (h, w) = (a.height(), a.width());
            let mut acc = 0.0;
            let mut count = 0usize;
            for i0 in 0..h - 10 {
                for j0 in 0..w - 10 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                    for di in 0..11 {
                        for dj in 0..11 {
                            let wgt = taps[di] * taps[dj];
                            let x = a.get(i0 + di, j0 + dj) as f64;
                            let y = b.get(i0 + di, j0 + dj) as f64;
                            ma += wgt * x;
                            mb += wgt * y;
                            saa += wgt * x * x;
                            sbb += wgt * y * y;
                            sab += wgt * x * y;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    let num = (2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4);
                    let den = (ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4);
                    acc += num / den;
                    count += 1;
                }
            }
            acc / count as f64
        }

        let a = random_image(25, 31, 7);
        let noisy = GrayImage::new(
            25,
            31,
            a.pixels().iter().enumerate().map(|(i, &v)| v + 0.05 * ((i % 7) as f32 - 3.0) / 3.0).collect(),
        )
        .unwrap();
        let fast = ssim(&a, &noisy).unwrap();
        let slow = direct(&a, &noisy);
        assert!((fast - slow).abs() < 1e-6, "separable {fast} vs direct {slow}");
    }

    #[test]
    fn spectrum_of_constant_and_identity_patches() {
        // Constant c: rank one with sigma_1 = c * 33.
        let c = 0.4f32;
        let patch = GrayImage::constant(33, 33, c).unwrap();
        let sv = singular_spectrum(&patch).unwrap();
        assert!((sv[0] - c as f64 * 33.0).abs() < 1e-8, "sigma1 {}", sv[0]);
        for &s in &sv[1..] {
            assert!(s.abs() < 1e-8);
        }

        // Identity-like: all 33 values are one.
        let mut pixels = vec![0.0f32; 33 * 33];
        for i in 0..33 {
            pixels[i * 33 + i] = 1.0;
        }
        let eye = GrayImage::new(33, 33, pixels).unwrap();
        let sv = singular_spectrum(&eye).unwrap();
        assert_eq!(sv.len(), 33);
        for &s in &sv {
            assert!((s - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn energy_ratio_values_and_monotonicity() {
        assert_eq!(energy_ratio(&[5.0, 0.0, 0.0], 1), 1.0);
        assert_eq!(energy_ratio(&[3.0, 2.0, 1.0], 3), 1.0);
        let v = energy_ratio(&[3.0, 2.0, 1.0], 2);
        assert!((v - 13.0 / 14.0).abs() < 1e-12);
        assert_eq!(energy_ratio(&[], 0), 1.0);

        let spectrum = [4.0, 3.0, 2.5, 1.0, 0.5, 0.0];
        let mut last = 0.0;
        for r in 0..=spectrum.len() {
            let e = energy_ratio(&spectrum, r);
            assert!(e >= last);
            last = e;
        }
    }
}
