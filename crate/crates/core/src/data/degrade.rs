//! LR synthesis and quality labelling.

use serde::{Deserialize, Serialize};
use varsr_numerics::Rng;

use super::image::{gaussian_blur, resize_bicubic, ImageBuffer};
use crate::error::{config, shape, Result};

/// Single-order degradation: blur, bicubic downsample, additive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub factor: usize,
    pub seed: u64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            blur_sigma: (0.5, 2.0),
            noise_sigma: (0.01, 0.05),
            factor: 4,
            seed: 0,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0 >= 0.0 && r.1 >= r.0 && r.1.is_finite();
        if self.factor == 0 {
            return config("degradation factor must be at least 1");
        }
        if !ok(self.blur_sigma) || !ok(self.noise_sigma) {
            return config("degradation sigma ranges must be non-negative and ordered");
        }
        Ok(())
    }

    /// Per-sample stream (`seed ⊕ index`).
    pub fn sample_rng(&self, index: u64) -> Rng {
        Rng::derive(self.seed, "degrade", index)
    }
}

pub fn add_gaussian_noise(img: &mut ImageBuffer, sigma: f64, rng: &mut Rng) {
    if sigma <= 0.0 {
        return;
    }
    for v in img.data_mut() {
        *v += (rng.normal() * sigma) as f32;
    }
}

/// Blur (σ ~ U[blur range]) → bicubic downsample → noise (σ ~ U[noise range])
/// → clamp.
pub fn degrade(hr: &ImageBuffer, params: &DegradationParams, rng: &mut Rng) -> Result<ImageBuffer> {
    params.validate()?;
    let (h, w) = hr.dims();
    let f = params.factor;
    if h % f != 0 || w % f != 0 {
        return shape(format!("{h}x{w} image not divisible by factor {f}"));
    }
    let blur = rng.uniform_range(params.blur_sigma.0, params.blur_sigma.1);
    let noise = rng.uniform_range(params.noise_sigma.0, params.noise_sigma.1);
    let blurred = gaussian_blur(hr, blur);
    let mut lr = resize_bicubic(&blurred, h / f, w / f)?;
    add_gaussian_noise(&mut lr, noise, rng);
    lr.clamp01();
    Ok(lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityLabel {
    Positive,
    Negative,
}

impl QualityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "positive" => Some(Self::Positive),
            "negative" => Some(Self::Negative),
            _ => None,
        }
    }
}

/// Strong blur and noise applied to the HR target of negative samples.
pub const NEGATIVE_BLUR: (f64, f64) = (1.5, 3.0);
pub const NEGATIVE_NOISE: (f64, f64) = (0.03, 0.08);

/// Draws a label; negatives also get a heavily degraded copy of `hr` that
/// replaces the training target.
pub fn label_quality(
    hr: &ImageBuffer,
    rng: &mut Rng,
    neg_fraction: f64,
) -> Result<(QualityLabel, ImageBuffer)> {
    if !(0.0..=1.0).contains(&neg_fraction) {
        return config(format!("neg_fraction {neg_fraction} outside [0, 1]"));
    }
    // Draw before branching so the label stream is independent of the outcome.
    let u = rng.uniform();
    if u >= neg_fraction {
        return Ok((QualityLabel::Positive, hr.clone()));
    }
    let sigma = rng.uniform_range(NEGATIVE_BLUR.0, NEGATIVE_BLUR.1);
    let noise = rng.uniform_range(NEGATIVE_NOISE.0, NEGATIVE_NOISE.1);
    let mut out = gaussian_blur(hr, sigma);
    add_gaussian_noise(&mut out, noise, rng);
    out.clamp01();
    Ok((QualityLabel::Negative, out))
}

/// One training/evaluation pair.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub hr: ImageBuffer,
    pub lr: ImageBuffer,
    pub quality: QualityLabel,
    pub class_id: usize,
}

/// Labels `hr` and synthesizes its LR input. The LR always comes from the
/// clean image; only the target of a negative sample is degraded.
pub fn make_pair(
    hr: &ImageBuffer,
    class_id: usize,
    params: &DegradationParams,
    neg_fraction: f64,
    index: u64,
) -> Result<PairedSample> {
    let mut rng = params.sample_rng(index);
    let lr = degrade(hr, params, &mut rng)?;
    let (quality, target) = label_quality(hr, &mut rng, neg_fraction)?;
    Ok(PairedSample {
        hr: target,
        lr,
        quality,
        class_id,
    })
}
