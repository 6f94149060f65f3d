//! Run configuration: a flat, namespaced JSON key set with desk defaults and
//! the full-scale reference values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varsr_numerics::AdamW;

use crate::arm::{ArmConfig, Sampler};
use crate::data::DegradationParams;
use crate::error::{config, Result, VarsrError};
use crate::guidance::{GuidanceSchedule, Ramp};
use crate::refiner::RefinerConfig;
use crate::schedule::Schedule;
use crate::tokenizer::{EmaConfig, TokenizerConfig, VaeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "run.seed")]
    pub seed: u64,

    #[serde(rename = "data.train_manifest")]
    pub train_manifest: PathBuf,
    #[serde(rename = "data.eval_manifest")]
    pub eval_manifest: PathBuf,
    /// Images generated by `corpus` for training.
    #[serde(rename = "data.corpus_size")]
    pub corpus_size: usize,
    /// Images generated by `corpus` for evaluation.
    #[serde(rename = "data.holdout_size")]
    pub holdout_size: usize,
    #[serde(rename = "data.classes")]
    pub classes: usize,
    #[serde(rename = "data.blur_sigma")]
    pub blur_sigma: (f64, f64),
    #[serde(rename = "data.noise_sigma")]
    pub noise_sigma: (f64, f64),
    #[serde(rename = "data.degrade_seed")]
    pub degrade_seed: u64,
    /// Fraction of positive training pairs turned into negatives.
    #[serde(rename = "data.negative_fraction")]
    pub negative_fraction: f64,

    #[serde(rename = "tokenizer.schedule")]
    pub schedule: Vec<usize>,
    #[serde(rename = "tokenizer.vocab")]
    pub vocab: usize,
    #[serde(rename = "tokenizer.latent_dim")]
    pub latent_dim: usize,
    #[serde(rename = "tokenizer.factor")]
    pub factor: usize,
    #[serde(rename = "tokenizer.channels")]
    pub vae_channels: usize,
    #[serde(rename = "tokenizer.blocks")]
    pub vae_blocks: usize,
    #[serde(rename = "tokenizer.ema_decay")]
    pub ema_decay: f64,
    #[serde(rename = "tokenizer.dead_patience")]
    pub dead_patience: usize,
    #[serde(rename = "tokenizer.bypass_prob")]
    pub bypass_prob: f64,
    #[serde(rename = "tokenizer.commitment")]
    pub commitment: f64,
    #[serde(rename = "tokenizer.iterations")]
    pub tokenizer_iterations: usize,
    #[serde(rename = "tokenizer.dropout_iterations")]
    pub dropout_iterations: usize,
    /// Scale-dropout probability of the fine-tuning phase.
    #[serde(rename = "tokenizer.p_d")]
    pub p_d: f64,
    #[serde(rename = "tokenizer.lr")]
    pub tokenizer_lr: f64,
    #[serde(rename = "tokenizer.batch_size")]
    pub tokenizer_batch: usize,

    #[serde(rename = "arm.width")]
    pub arm_width: usize,
    #[serde(rename = "arm.blocks")]
    pub arm_blocks: usize,
    #[serde(rename = "arm.heads")]
    pub arm_heads: usize,
    #[serde(rename = "arm.mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(rename = "arm.rope_theta")]
    pub rope_theta: f64,
    #[serde(rename = "arm.cond_channels")]
    pub cond_channels: Vec<usize>,

    #[serde(rename = "refiner.blocks")]
    pub refiner_blocks: usize,
    #[serde(rename = "refiner.width")]
    pub refiner_width: usize,
    #[serde(rename = "refiner.t_train")]
    pub t_train: usize,
    #[serde(rename = "refiner.steps")]
    pub refiner_steps: usize,
    #[serde(rename = "refiner.repeats")]
    pub refiner_repeats: usize,
    #[serde(rename = "refiner.clip_sigma")]
    pub clip_sigma: f64,

    /// Weight of the diffusion term in `CE + λ·L_diff`.
    #[serde(rename = "train.lambda")]
    pub lambda: f64,
    #[serde(rename = "train.lr")]
    pub lr: f64,
    #[serde(rename = "train.weight_decay")]
    pub weight_decay: f64,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.pretrain_iterations")]
    pub pretrain_iterations: usize,
    #[serde(rename = "train.finetune_iterations")]
    pub finetune_iterations: usize,
    #[serde(rename = "train.grad_clip")]
    pub grad_clip: f64,
    #[serde(rename = "train.log_every")]
    pub log_every: usize,

    #[serde(rename = "guidance.lambda_max")]
    pub lambda_max: f64,
    #[serde(rename = "guidance.ramp")]
    pub ramp: Ramp,
    #[serde(rename = "guidance.refiner")]
    pub guide_refiner: bool,

    #[serde(rename = "sample.greedy")]
    pub greedy: bool,
    #[serde(rename = "sample.temperature")]
    pub temperature: f64,
    #[serde(rename = "sample.top_k")]
    pub top_k: usize,

    #[serde(rename = "full.scales")]
    pub full_scales: Vec<usize>,
    #[serde(rename = "full.vocab")]
    pub full_vocab: usize,
    #[serde(rename = "full.arm_blocks")]
    pub full_arm_blocks: usize,
    #[serde(rename = "full.arm_width")]
    pub full_arm_width: usize,
    #[serde(rename = "full.refiner_blocks")]
    pub full_refiner_blocks: usize,
    #[serde(rename = "full.refiner_width")]
    pub full_refiner_width: usize,
    #[serde(rename = "full.t_train")]
    pub full_t_train: usize,
    #[serde(rename = "full.refiner_steps")]
    pub full_refiner_steps: usize,
    #[serde(rename = "full.iterations")]
    pub full_iterations: [usize; 3],
    #[serde(rename = "full.batch_size")]
    pub full_batch_size: usize,
    #[serde(rename = "full.lr")]
    pub full_lr: f64,
    #[serde(rename = "full.weight_decay")]
    pub full_weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_manifest: PathBuf::from("corpus/train.tsv"),
            eval_manifest: PathBuf::from("corpus/holdout.tsv"),
            corpus_size: 2000,
            holdout_size: 32,
            classes: 4,
            blur_sigma: (0.5, 2.0),
            noise_sigma: (0.01, 0.05),
            degrade_seed: 1,
            negative_fraction: 0.2,

            schedule: vec![1, 2, 4, 8, 16],
            vocab: 64,
            latent_dim: 16,
            factor: 4,
            vae_channels: 64,
            vae_blocks: 2,
            ema_decay: 0.99,
            dead_patience: 200,
            bypass_prob: 0.5,
            commitment: 0.25,
            tokenizer_iterations: 2000,
            dropout_iterations: 200,
            p_d: 0.1,
            tokenizer_lr: 1e-3,
            tokenizer_batch: 16,

            arm_width: 128,
            arm_blocks: 4,
            arm_heads: 4,
            mlp_ratio: 4,
            rope_theta: 1e4,
            cond_channels: vec![16, 32],

            refiner_blocks: 3,
            refiner_width: 128,
            t_train: 100,
            refiner_steps: 10,
            refiner_repeats: 4,
            clip_sigma: 5.0,

            lambda: 2.0,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            pretrain_iterations: 4000,
            finetune_iterations: 2000,
            grad_clip: 1.0,
            log_every: 50,

            lambda_max: 6.0,
            ramp: Ramp::Linear,
            guide_refiner: true,

            greedy: false,
            temperature: 1.0,
            top_k: 0,

            full_scales: vec![1, 2, 3, 4, 6, 9, 13, 18, 24, 32],
            full_vocab: 4096,
            full_arm_blocks: 24,
            full_arm_width: 1536,
            full_refiner_blocks: 6,
            full_refiner_width: 1024,
            full_t_train: 1000,
            full_refiner_steps: 10,
            full_iterations: [10_000, 40_000, 20_000],
            full_batch_size: 128,
            full_lr: 5e-5,
            full_weight_decay: 5e-2,
        }
    }
}

impl RunConfig {
    /// Parses JSON text; absent keys take desk defaults, unknown keys fail.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| VarsrError::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VarsrError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            VarsrError::Config(msg) => VarsrError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Resolves relative manifest paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.train_manifest, &mut self.eval_manifest] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer_config()?.validate()?;
        self.arm_config().validate()?;
        self.refiner_config().validate()?;
        self.degradation().validate()?;
        GuidanceSchedule::new(self.lambda_max, self.ramp, self.guide_refiner)?;
        if self.batch_size == 0 || self.tokenizer_batch == 0 {
            return config("batch sizes must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config(format!("loss balance {} must be finite and non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.p_d) {
            return config(format!("scale dropout {} outside [0, 1)", self.p_d));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return config(format!("negative fraction {} outside [0, 1]", self.negative_fraction));
        }
        if self.classes == 0 {
            return config("at least one class is required");
        }
        if !(self.lr > 0.0 && self.tokenizer_lr > 0.0) {
            return config("learning rates must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::square(&self.schedule)
    }

    pub fn tokenizer_config(&self) -> Result<TokenizerConfig> {
        Ok(TokenizerConfig {
            vae: VaeConfig {
                factor: self.factor,
                latent_dim: self.latent_dim,
                channels: self.vae_channels,
                blocks: self.vae_blocks,
            },
            codebook_size: self.vocab,
            schedule: self.schedule()?,
            ema: EmaConfig {
                decay: self.ema_decay,
                dead_patience: self.dead_patience,
                ..EmaConfig::default()
            },
            bypass_prob: self.bypass_prob,
            commitment: self.commitment,
        })
    }

    pub fn arm_config(&self) -> ArmConfig {
        ArmConfig {
            width: self.arm_width,
            heads: self.arm_heads,
            blocks: self.arm_blocks,
            mlp_ratio: self.mlp_ratio,
            rope_theta: self.rope_theta,
            cond_channels: self.cond_channels.clone(),
            num_classes: self.classes,
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            blocks: self.refiner_blocks,
            width: self.refiner_width,
            t_train: self.t_train,
            steps: self.refiner_steps,
            repeats: self.refiner_repeats,
            clip_sigma: self.clip_sigma,
            ..RefinerConfig::default()
        }
    }

    pub fn degradation(&self) -> DegradationParams {
        DegradationParams {
            blur_sigma: self.blur_sigma,
            noise_sigma: self.noise_sigma,
            factor: self.factor,
            seed: self.degrade_seed,
        }
    }

    /// HR image side implied by the schedule and latent factor.
    pub fn image_size(&self) -> usize {
        self.schedule.last().copied().unwrap_or(0) * self.factor
    }

    pub fn lr_size(&self) -> usize {
        self.image_size() / self.factor
    }

    pub fn guidance(&self) -> Result<GuidanceSchedule> {
        GuidanceSchedule::new(self.lambda_max, self.ramp, self.guide_refiner)
    }

    pub fn sampler(&self) -> Sampler {
        Sampler {
            greedy: self.greedy,
            temperature: self.temperature,
            top_k: self.top_k,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn tokenizer_optimizer(&self) -> AdamW {
        AdamW {
            lr: self.tokenizer_lr,
            ..AdamW::default()
        }
    }

    /// Keys whose values must agree between a checkpoint and the run that
    /// continues from it.
    pub fn tokenizer_mismatch(&self, other: &RunConfig) -> Option<&'static str> {
        let checks: [(&'static str, bool); 6] = [
            ("tokenizer.schedule", self.schedule == other.schedule),
            ("tokenizer.vocab", self.vocab == other.vocab),
            ("tokenizer.latent_dim", self.latent_dim == other.latent_dim),
            ("tokenizer.factor", self.factor == other.factor),
            ("tokenizer.channels", self.vae_channels == other.vae_channels),
            ("tokenizer.blocks", self.vae_blocks == other.vae_blocks),
        ];
        checks.into_iter().find(|(_, ok)| !ok).map(|(k, _)| k)
    }

    /// As [`Self::tokenizer_mismatch`], extended to the network shapes.
    pub fn network_mismatch(&self, other: &RunConfig) -> Option<&'static str> {
        if let Some(k) = self.tokenizer_mismatch(other) {
            return Some(k);
        }
        let checks: [(&'static str, bool); 9] = [
            ("arm.width", self.arm_width == other.arm_width),
            ("arm.blocks", self.arm_blocks == other.arm_blocks),
            ("arm.heads", self.arm_heads == other.arm_heads),
            ("arm.mlp_ratio", self.mlp_ratio == other.mlp_ratio),
            ("arm.cond_channels", self.cond_channels == other.cond_channels),
            ("data.classes", self.classes == other.classes),
            ("refiner.blocks", self.refiner_blocks == other.refiner_blocks),
            ("refiner.width", self.refiner_width == other.refiner_width),
            ("refiner.t_train", self.t_train == other.t_train),
        ];
        checks.into_iter().find(|(_, ok)| !ok).map(|(k, _)| k)
    }
}
