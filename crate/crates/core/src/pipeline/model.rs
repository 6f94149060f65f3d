//! Trained components and their checkpoint sections.

use varsr_numerics::{ParamStore, Rng, Tensor};

use super::checkpoint::{Checkpoint, Entry, Section};
use super::config::RunConfig;
use crate::arm::Arm;
use crate::error::{config, Result, VarsrError};
use crate::refiner::Refiner;
use crate::tokenizer::{Codebook, Tokenizer, TokenizerTrainer};

pub const TOKENIZER: &str = "tokenizer";
pub const TOKENIZER_OPT: &str = "tokenizer_optimizer";
pub const ARM: &str = "arm";
pub const REFINER: &str = "refiner";
pub const OPTIMIZER: &str = "optimizer";
pub const PROGRESS: &str = "progress";

/// Completed steps of each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub tokenizer: u64,
    pub pretrain: u64,
    pub finetune: u64,
}

impl Progress {
    pub fn section(&self) -> Section {
        let mut s = Section::new(PROGRESS);
        s.push(Entry::u64("tokenizer", &[self.tokenizer]));
        s.push(Entry::u64("pretrain", &[self.pretrain]));
        s.push(Entry::u64("finetune", &[self.finetune]));
        s
    }

    pub fn read(ckpt: &Checkpoint) -> Result<Self> {
        let s = ckpt.section(PROGRESS)?;
        Ok(Self {
            tokenizer: s.get("tokenizer")?.scalar_u64()?,
            pretrain: s.get("pretrain")?.scalar_u64()?,
            finetune: s.get("finetune")?.scalar_u64()?,
        })
    }
}

/// VAE weights and the codebook with its EMA statistics.
pub fn tokenizer_section(tok: &Tokenizer) -> Section {
    let mut s = Section::from_store(TOKENIZER, tok.params(), "");
    let cb = tok.codebook();
    s.push(Entry::f32("codebook.vectors", cb.vectors()));
    s.push(Entry::f64("codebook.ema_counts", cb.ema_counts()));
    s.push(Entry::f64("codebook.ema_sums", cb.ema_sums()));
    let idle: Vec<u64> = cb.idle_steps().iter().map(|&v| v as u64).collect();
    s.push(Entry::u64("codebook.idle_steps", &idle));
    s
}

pub fn restore_tokenizer(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Tokenizer> {
    let s = ckpt.section(TOKENIZER)?;
    let mut tok = Tokenizer::new(cfg.tokenizer_config()?, cfg.seed)?;
    let params = Section {
        name: s.name.clone(),
        entries: s.entries.iter().filter(|e| !e.name.starts_with("codebook.")).cloned().collect(),
    };
    params.load_into(tok.params_mut(), "")?;
    let vectors = s.get("codebook.vectors")?.as_tensor()?;
    if vectors.shape() != tok.codebook().vectors().shape() {
        return Err(VarsrError::Checkpoint(format!(
            "codebook {:?} does not match the configured {:?}",
            vectors.shape(),
            tok.codebook().vectors().shape()
        )));
    }
    let idle = s.get("codebook.idle_steps")?.as_u64()?.iter().map(|&v| v as usize).collect();
    *tok.codebook_mut() = Codebook::with_state(
        vectors,
        s.get("codebook.ema_counts")?.as_f64()?.to_vec(),
        s.get("codebook.ema_sums")?.as_f64()?.to_vec(),
        idle,
    )?;
    Ok(tok)
}

pub fn tokenizer_trainer_section(tok: &Tokenizer, tr: &TokenizerTrainer) -> Section {
    let mut s = Section::new(TOKENIZER_OPT);
    s.push_optimizer("", tok.params(), &tr.state);
    s.push_optimizer("codebook.", &tr.codebook_store, &tr.codebook_state);
    s.push(Entry::u64("trainer.step", &[tr.step]));
    s
}

pub fn restore_tokenizer_trainer(cfg: &RunConfig, tok: &Tokenizer, ckpt: &Checkpoint) -> Result<TokenizerTrainer> {
    let mut tr = TokenizerTrainer::new(tok, cfg.tokenizer_optimizer());
    let s = ckpt.section(TOKENIZER_OPT)?;
    tr.state = s.read_optimizer("", tok.params())?;
    tr.codebook_state = s.read_optimizer("codebook.", &tr.codebook_store)?;
    tr.step = s.get("trainer.step")?.scalar_u64()?;
    Ok(tr)
}

/// The transformer and the refiner, registered in one parameter store so the
/// diffusion loss can reach the transformer through `x_K`.
#[derive(Clone, Debug)]
pub struct Networks {
    pub arm: Arm<f32>,
    pub refiner: Refiner,
    pub store: ParamStore<f32>,
}

impl Networks {
    pub fn new(cfg: &RunConfig, tok: &Tokenizer) -> Result<Self> {
        let mut rng = Rng::stream(cfg.seed, "init.networks");
        let mut store = ParamStore::new();
        let side = cfg.image_size();
        let arm = Arm::new(
            cfg.arm_config(),
            cfg.schedule()?,
            tok.codebook().clone(),
            (side, side),
            &mut store,
            &mut rng,
        )?;
        let refiner = Refiner::new(cfg.refiner_config(), tok.latent_dim(), cfg.arm_width, &mut store, &mut rng)?;
        Ok(Self { arm, refiner, store })
    }

    pub fn sections(&self) -> [Section; 2] {
        [
            Section::from_store(ARM, &self.store, "arm."),
            Section::from_store(REFINER, &self.store, "refiner."),
        ]
    }

    pub fn restore(cfg: &RunConfig, tok: &Tokenizer, ckpt: &Checkpoint) -> Result<Self> {
        if !ckpt.has_section(ARM) || !ckpt.has_section(REFINER) {
            return config("checkpoint holds no trained transformer (run pretrain first)");
        }
        let mut nets = Self::new(cfg, tok)?;
        ckpt.section(ARM)?.load_into(&mut nets.store, "arm.")?;
        ckpt.section(REFINER)?.load_into(&mut nets.store, "refiner.")?;
        Ok(nets)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Everything inference needs, restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct VarsrModel {
    pub config: RunConfig,
    pub tokenizer: Tokenizer,
    pub nets: Networks,
}

impl VarsrModel {
    /// Rebuilds the model with the configuration embedded in `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_json(&ckpt.config)?;
        let tokenizer = restore_tokenizer(&config, ckpt)?;
        let nets = Networks::restore(&config, &tokenizer, ckpt)?;
        Ok(Self {
            config,
            tokenizer,
            nets,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mean and population standard deviation of all entries.
pub fn mean_std(values: &[Tensor<f32>]) -> (f64, f64) {
    let n: usize = values.iter().map(|t| t.numel()).sum();
    if n == 0 {
        return (0.0, 0.0);
    }
    let sum: f64 = values.iter().flat_map(|t| t.data()).map(|&v| v as f64).sum();
    let mean = sum / n as f64;
    let var: f64 = values
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt())
}
