//! Super-resolution inference, held-out evaluation and the cost report.

use std::fmt::Write as _;
use std::path::Path;

use varsr_numerics::Rng;

use super::model::VarsrModel;
use crate::arm::{allowed_pairs, generate, Condition, Sampler};
use crate::data::{bicubic_upscale, degrade, psnr, read_image, read_manifest, ssim_y, ImageBuffer, QualityLabel};
use crate::error::{config, shape, Result, VarsrError};
use crate::guidance::GuidanceSchedule;
use crate::schedule::Schedule;
use crate::tokenizer::TokenPyramid;

/// Inference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrOptions {
    /// `None` runs the positive stream alone.
    pub guidance: Option<GuidanceSchedule>,
    pub sampler: Sampler,
    pub seed: u64,
}

impl SrOptions {
    /// Guidance, sampler and seed from the run configuration.
    pub fn from_config(model: &VarsrModel) -> Result<Self> {
        Ok(Self {
            guidance: Some(model.config.guidance()?),
            sampler: model.config.sampler(),
            seed: model.config.seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SrOutput {
    pub image: ImageBuffer,
    pub pyramid: TokenPyramid,
    /// Transformer forward passes (one per scale).
    pub ar_passes: usize,
    /// Refiner denoising steps.
    pub refiner_steps: usize,
}

/// LR image → prefix tokens → K guided scale steps → refiner residual →
/// decode of the quantized sum plus residual.
pub fn super_resolve(model: &VarsrModel, lr: &ImageBuffer, opts: &SrOptions) -> Result<SrOutput> {
    let side = model.config.lr_size();
    if lr.dims() != (side, side) {
        return shape(format!("LR image {:?} does not match the configured {side}x{side}", lr.dims()));
    }
    if !lr.is_finite() {
        return Err(VarsrError::Generation("LR image holds non-finite values".into()));
    }
    let nets = &model.nets;
    let cond = Condition::Image {
        lr,
        quality: QualityLabel::Positive,
    };
    let mut rng = Rng::stream(opts.seed, "sr.tokens");
    let gen = generate(&nets.arm, &nets.store, cond, opts.guidance.as_ref(), &opts.sampler, &mut rng)?;
    let negative = match (&opts.guidance, gen.x_k.as_slice()) {
        (Some(gs), [_, neg]) if gs.refiner => Some((neg, gs.lambda_max)),
        _ => None,
    };
    let steps = nets.refiner.config().steps;
    let sample = nets.refiner.sample(&nets.store, &gen.x_k[0], negative, steps, opts.seed)?;
    let tok = &model.tokenizer;
    let recon = tok.quantizer().reconstruct(&gen.pyramid, tok.codebook(), None)?;
    let latent = recon.zip_map(&sample.z, |a, b| a + b)?;
    if !latent.is_finite() {
        return Err(VarsrError::Generation("non-finite latent before decoding".into()));
    }
    let image = tok.decode(&latent)?;
    Ok(SrOutput {
        image,
        pyramid: gen.pyramid,
        ar_passes: gen.forward_passes,
        refiner_steps: sample.steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_bicubic_psnr: f64,
    pub mean_bicubic_ssim: f64,
    pub ar_passes: usize,
    pub refiner_steps: usize,
    pub parameters: usize,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, ar_passes: usize, refiner_steps: usize, parameters: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            mean_bicubic_psnr: mean(|r| r.bicubic_psnr),
            mean_bicubic_ssim: mean(|r| r.bicubic_ssim),
            rows,
            ar_passes,
            refiner_steps,
            parameters,
        }
    }

    pub fn psnr_gain(&self) -> f64 {
        self.mean_psnr - self.mean_bicubic_psnr
    }

    pub fn ssim_gain(&self) -> f64 {
        self.mean_ssim - self.mean_bicubic_ssim
    }

    /// Per-image rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim,bicubic_psnr,bicubic_ssim,delta_psnr,delta_ssim\n");
        let mut row = |name: &str, p: f64, q: f64, bp: f64, bq: f64| {
            let _ = writeln!(s, "{name},{p:.6},{q:.6},{bp:.6},{bq:.6},{:.6},{:.6}", p - bp, q - bq);
        };
        for r in &self.rows {
            row(&r.image, r.psnr, r.ssim, r.bicubic_psnr, r.bicubic_ssim);
        }
        row(
            "mean",
            self.mean_psnr,
            self.mean_ssim,
            self.mean_bicubic_psnr,
            self.mean_bicubic_ssim,
        );
        s
    }
}

/// LR input of held-out image `index`, from a stream separate from training.
pub fn eval_lr(model: &VarsrModel, hr: &ImageBuffer, index: usize) -> Result<ImageBuffer> {
    let params = model.config.degradation();
    let mut rng = Rng::derive(params.seed, "eval.degrade", index as u64);
    degrade(hr, &params, &mut rng)
}

/// Super-resolves every manifest image from its synthesized LR input and
/// scores it against the HR original and the bicubic baseline.
pub fn evaluate(model: &VarsrModel, manifest: &Path, opts: &SrOptions) -> Result<EvalReport> {
    if !manifest.exists() {
        return config(format!("evaluation manifest {} not found", manifest.display()));
    }
    let entries = read_manifest(manifest)?;
    let side = model.config.image_size();
    let mut rows = Vec::with_capacity(entries.len());
    let (mut ar, mut steps) = (0, 0);
    for (i, e) in entries.iter().enumerate() {
        let hr = read_image(&e.path)?;
        if hr.dims() != (side, side) {
            return config(format!(
                "{}: image {:?} does not match the checkpoint schedule's {side}x{side} frame",
                e.path.display(),
                hr.dims()
            ));
        }
        let lr = eval_lr(model, &hr, i)?;
        let image_opts = SrOptions {
            seed: Rng::derive(opts.seed, "eval.image", i as u64).next_u64(),
            ..*opts
        };
        let out = super_resolve(model, &lr, &image_opts)?;
        let bicubic = bicubic_upscale(&lr, model.config.factor)?;
        ar = out.ar_passes;
        steps = out.refiner_steps;
        rows.push(EvalRow {
            image: e
                .path
                .file_name()
                .map_or_else(|| e.path.display().to_string(), |n| n.to_string_lossy().into_owned()),
            psnr: psnr(&out.image, &hr)?,
            ssim: ssim_y(&out.image, &hr)?,
            bicubic_psnr: psnr(&bicubic, &hr)?,
            bicubic_ssim: ssim_y(&bicubic, &hr)?,
        });
    }
    Ok(EvalReport::from_rows(rows, ar, steps, model.nets.num_params()))
}

/// Token and attention cost of one scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleCost {
    pub side: (usize, usize),
    pub tokens: usize,
    pub cumulative: usize,
    /// Query-key pairs the block-causal mask admits for this scale's queries.
    pub attention_pairs: usize,
}

pub fn scale_costs(schedule: &Schedule, prefix_len: usize) -> Vec<ScaleCost> {
    let mut out = Vec::with_capacity(schedule.len());
    let mut cumulative = 0;
    for k in 0..schedule.len() {
        let tokens = schedule.tokens(k);
        cumulative += tokens;
        out.push(ScaleCost {
            side: schedule.dims(k),
            tokens,
            cumulative,
            attention_pairs: tokens * (prefix_len + cumulative),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub desk: Vec<ScaleCost>,
    pub desk_prefix: usize,
    pub desk_attention_pairs: usize,
    pub full: Vec<ScaleCost>,
    pub full_attention_pairs: usize,
    pub forward_passes: usize,
    pub refiner_steps: usize,
    pub parameters: usize,
}

impl BenchReport {
    pub fn total_tokens(&self) -> usize {
        self.desk.last().map_or(0, |c| c.cumulative)
    }

    pub fn full_total_tokens(&self) -> usize {
        self.full.last().map_or(0, |c| c.cumulative)
    }

    /// Long-format `metric,scale,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,scale,value\n");
        let mut put = |metric: &str, scale: Option<usize>, value: usize| {
            let scale = scale.map_or(String::new(), |k| k.to_string());
            let _ = writeln!(s, "{metric},{scale},{value}");
        };
        for (name, costs, pairs) in [
            ("desk", &self.desk, self.desk_attention_pairs),
            ("full", &self.full, self.full_attention_pairs),
        ] {
            for (k, c) in costs.iter().enumerate() {
                put(&format!("{name}.side"), Some(k + 1), c.side.0);
                put(&format!("{name}.tokens"), Some(k + 1), c.tokens);
                put(&format!("{name}.attention_pairs"), Some(k + 1), c.attention_pairs);
            }
            put(&format!("{name}.scales"), None, costs.len());
            put(&format!("{name}.total_tokens"), None, costs.last().map_or(0, |c| c.cumulative));
            put(&format!("{name}.total_attention_pairs"), None, pairs);
            put(
                &format!("{name}.next_token_forward_passes"),
                None,
                costs.last().map_or(0, |c| c.cumulative),
            );
        }
        put("desk.prefix_tokens", None, self.desk_prefix);
        put("forward_passes", None, self.forward_passes);
        put("refiner_steps", None, self.refiner_steps);
        put("parameters", None, self.parameters);
        s
    }
}

/// Static costs of the configured and full-scale schedules plus the pass
/// counts of one measured generation on a flat grey input.
pub fn bench(model: &VarsrModel, opts: &SrOptions) -> Result<BenchReport> {
    let schedule = model.config.schedule()?;
    let prefix = model.nets.arm.prefix_len(true);
    let full = Schedule::square(&model.config.full_scales)?;
    // The full-scale model also conditions on a final-scale-sized prefix.
    let full_prefix = full.tokens(full.len() - 1);
    let side = model.config.lr_size();
    let lr = ImageBuffer::filled(side, side, [0.5; 3]);
    let out = super_resolve(model, &lr, opts)?;
    Ok(BenchReport {
        desk: scale_costs(&schedule, prefix),
        desk_prefix: prefix,
        desk_attention_pairs: allowed_pairs(&schedule, prefix),
        full: scale_costs(&full, full_prefix),
        full_attention_pairs: allowed_pairs(&full, full_prefix),
        forward_passes: out.ar_passes,
        refiner_steps: out.refiner_steps,
        parameters: model.nets.num_params(),
    })
}
