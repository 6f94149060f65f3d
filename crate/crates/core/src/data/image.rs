//! RGB float images and the resamplers shared by preprocessing, degradation
//! and the bicubic baseline.

use crate::error::{shape, Result};

/// `height × width × 3` image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape(format!("image dims must be positive, got {height}x{width}"));
        }
        if data.len() != height * width * 3 {
            return shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Planar `3 × H × W` copy, the layout the conv stacks consume.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self> {
        let n = height * width;
        if planar.len() != 3 * n {
            return shape(format!("planar buffer of {} for {height}x{width}x3", planar.len()));
        }
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = planar[c * n + p];
            }
        }
        Self::new(height, width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return shape(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            ));
        }
        Ok(Self::from_fn(height, width, |y, x| self.pixel(top + y, left + x)))
    }
}

/// Keys cubic kernel with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Sparse 1-D resampling matrix: for every output index, the first input
/// index and the normalized tap weights.
struct Taps {
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

/// Half-pixel-centred bicubic taps. When shrinking, the kernel is stretched by
/// the scale so the filter also acts as the anti-alias prefilter; weights are
/// renormalized at the borders.
fn bicubic_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    let mut start = Vec::with_capacity(output);
    let mut weights = Vec::with_capacity(output);
    for o in 0..output {
        let center = (o as f64 + 0.5) * scale;
        let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
        let hi = ((center + support + 0.5).floor() as usize).min(input);
        let mut w: Vec<f64> = (lo..hi)
            .map(|i| cubic_weight((i as f64 + 0.5 - center) / filter_scale))
            .collect();
        let total: f64 = w.iter().sum();
        if total != 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        }
        start.push(lo);
        weights.push(w);
    }
    Taps { start, weights }
}

fn apply_taps_rows(img: &ImageBuffer, taps: &Taps, out_w: usize) -> ImageBuffer {
    let h = img.height;
    let mut out = vec![0.0f32; h * out_w * 3];
    for y in 0..h {
        for (o, w) in taps.weights.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in w.iter().enumerate() {
                let px = img.pixel(y, taps.start[o] + t);
                for c in 0..3 {
                    acc[c] += wt * px[c] as f64;
                }
            }
            let i = (y * out_w + o) * 3;
            for c in 0..3 {
                out[i + c] = acc[c] as f32;
            }
        }
    }
    ImageBuffer {
        height: h,
        width: out_w,
        data: out,
    }
}

fn apply_taps_cols(img: &ImageBuffer, taps: &Taps, out_h: usize) -> ImageBuffer {
    let w = img.width;
    let mut out = vec![0.0f32; out_h * w * 3];
    for (o, wts) in taps.weights.iter().enumerate() {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in wts.iter().enumerate() {
                let px = img.pixel(taps.start[o] + t, x);
                for c in 0..3 {
                    acc[c] += wt * px[c] as f64;
                }
            }
            let i = (o * w + x) * 3;
            for c in 0..3 {
                out[i + c] = acc[c] as f32;
            }
        }
    }
    ImageBuffer {
        height: out_h,
        width: w,
        data: out,
    }
}

/// Separable bicubic resize. The result is not clamped; bicubic overshoot is
/// left to the caller.
pub fn resize_bicubic(img: &ImageBuffer, height: usize, width: usize) -> Result<ImageBuffer> {
    if height == 0 || width == 0 {
        return shape(format!("resize target {height}x{width} must be positive"));
    }
    let mut cur = img.clone();
    if width != cur.width {
        cur = apply_taps_rows(&cur, &bicubic_taps(cur.width, width), width);
    }
    if height != cur.height {
        cur = apply_taps_cols(&cur, &bicubic_taps(cur.height, height), height);
    }
    Ok(cur)
}

/// Bicubic upsampling clamped to `[0, 1]`: the fidelity floor for SR.
pub fn bicubic_upscale(lr: &ImageBuffer, factor: usize) -> Result<ImageBuffer> {
    let mut up = resize_bicubic(lr, lr.height * factor, lr.width * factor)?;
    up.clamp01();
    Ok(up)
}

/// Normalized Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` is a copy.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = img.dims();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = ImageBuffer::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in k.iter().enumerate() {
                let px = img.pixel(y, clampi(x as i64 + t as i64 - r, w));
                for c in 0..3 {
                    acc[c] += wt * px[c] as f64;
                }
            }
            tmp.set_pixel(y, x, acc.map(|v| v as f32));
        }
    }
    let mut out = ImageBuffer::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in k.iter().enumerate() {
                let px = tmp.pixel(clampi(y as i64 + t as i64 - r, h), x);
                for c in 0..3 {
                    acc[c] += wt * px[c] as f64;
                }
            }
            out.set_pixel(y, x, acc.map(|v| v as f32));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        // Partition of unity at a half-pixel offset.
        let s: f64 = [-1.5, -0.5, 0.5, 1.5].iter().map(|&x| cubic_weight(x)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_keeps_constants() {
        let img = ImageBuffer::filled(20, 12, [0.25, 0.5, 0.75]);
        for (h, w) in [(5, 3), (64, 40), (20, 12), (7, 31)] {
            let out = resize_bicubic(&img, h, w).unwrap();
            assert_eq!(out.dims(), (h, w));
            for v in out.data().chunks(3) {
                assert!((v[0] - 0.25).abs() < 1e-6 && (v[2] - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn integer_downscale_of_step_is_symmetric() {
        let img = ImageBuffer::from_fn(8, 8, |_, x| if x < 4 { [0.0; 3] } else { [1.0; 3] });
        let out = resize_bicubic(&img, 2, 2).unwrap();
        let l = out.pixel(0, 0)[0];
        let r = out.pixel(0, 1)[0];
        assert!((l + r - 1.0).abs() < 1e-6);
        assert!(l < 0.1 && r > 0.9);
    }

    #[test]
    fn blur_preserves_mean_of_constant_and_zero_sigma_copies() {
        let img = ImageBuffer::filled(9, 9, [0.3, 0.3, 0.3]);
        let b = gaussian_blur(&img, 1.2);
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let grad = ImageBuffer::from_fn(4, 4, |y, x| [(y * 4 + x) as f32 / 16.0; 3]);
        assert_eq!(gaussian_blur(&grad, 0.0), grad);
    }

    #[test]
    fn planar_roundtrip() {
        let img = ImageBuffer::from_fn(3, 5, |y, x| [y as f32, x as f32, 0.5]);
        let back = ImageBuffer::from_planar(3, 5, &img.to_planar()).unwrap();
        assert_eq!(img, back);
    }
}
