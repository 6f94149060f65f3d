//! Fidelity metrics.

use super::image::ImageBuffer;
use crate::error::{shape, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.dims() != b.dims() {
        return shape(format!("metric inputs {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// PSNR over all RGB values for a peak of 1, capped for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// BT.601 studio-range luma in `[16/255, 235/255]`.
pub fn luma(rgb: [f32; 3]) -> f64 {
    (16.0 + 65.481 * rgb[0] as f64 + 128.553 * rgb[1] as f64 + 24.966 * rgb[2] as f64) / 255.0
}

pub fn luma_plane(img: &ImageBuffer) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .collect()
}

/// Normalized 1-D Gaussian of length [`SSIM_WINDOW`].
pub fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|t| k[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on the luma channel over all valid 11×11 Gaussian windows.
pub fn ssim_y(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let ya = luma_plane(a);
    let yb = luma_plane(b);
    let k = ssim_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&ya, h, w, &k);
    let mu_b = filter_valid(&yb, h, w, &k);
    let aa = filter_valid(&prod(&ya, &ya), h, w, &k);
    let bb = filter_valid(&prod(&yb, &yb), h, w, &k);
    let ab = filter_valid(&prod(&ya, &yb), h, w, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let a = ImageBuffer::filled(4, 4, [0.5; 3]);
        let b = ImageBuffer::filled(4, 4, [0.6; 3]);
        // MSE = 0.01 (up to f32 rounding of 0.6 - 0.5).
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity_and_negative() {
        let img = ImageBuffer::from_fn(16, 16, |y, x| {
            [((x * y) % 7) as f32 / 7.0, x as f32 / 16.0, y as f32 / 16.0]
        });
        let neg = ImageBuffer::from_fn(16, 16, |y, x| img.pixel(y, x).map(|v| 1.0 - v));
        assert!((ssim_y(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim_y(&img, &neg).unwrap() < 1.0);
    }

    #[test]
    fn dims_mismatch_is_shape_error() {
        let a = ImageBuffer::filled(16, 16, [0.0; 3]);
        let b = ImageBuffer::filled(16, 12, [0.0; 3]);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim_y(&a, &b).is_err());
    }
}
