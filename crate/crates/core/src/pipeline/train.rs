//! The three training stages.

use std::path::Path;

use log::info;
use varsr_numerics::{Graph, OptimizerState, Rng, Tensor};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::{
    mean_std, restore_tokenizer, restore_tokenizer_trainer, tokenizer_section, tokenizer_trainer_section, Networks,
    Progress, OPTIMIZER,
};
use crate::arm::{token_loss, Condition};
use crate::data::{degrade, make_pair, read_image, read_manifest, ImageBuffer, PairedSample, QualityLabel};
use crate::error::{config, Result, VarsrError};
use crate::tokenizer::{Tokenizer, TokenizerTrainer, TokenPyramid};

/// Images listed in a manifest, checked against the configured frame.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageBuffer>,
    pub classes: Vec<usize>,
    pub qualities: Vec<QualityLabel>,
}

impl Dataset {
    pub fn load(manifest: &Path, side: usize) -> Result<Self> {
        if !manifest.exists() {
            return config(format!("corpus manifest {} not found", manifest.display()));
        }
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            return config(format!("corpus manifest {} is empty", manifest.display()));
        }
        let mut out = Self {
            images: Vec::with_capacity(entries.len()),
            classes: Vec::with_capacity(entries.len()),
            qualities: Vec::with_capacity(entries.len()),
        };
        for e in entries {
            let img = read_image(&e.path)?;
            if img.dims() != (side, side) {
                return Err(VarsrError::Shape(format!(
                    "{}: image {:?} does not match the configured {side}x{side} frame",
                    e.path.display(),
                    img.dims()
                )));
            }
            out.images.push(img);
            out.classes.push(e.class_id);
            out.qualities.push(e.quality);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-step loss values with a fixed column set.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    pub columns: Vec<&'static str>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl LossLog {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{}\n", self.columns.join(","));
        for (step, vals) in &self.rows {
            let vals: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
            s.push_str(&format!("{step},{}\n", vals.join(",")));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| VarsrError::io(path, e))
    }
}

/// A stage's checkpoint and the losses of the steps it ran.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
}

impl StageOutput {
    /// Writes the checkpoint to `out` and the loss curve next to it.
    pub fn save(&self, out: &Path) -> Result<()> {
        self.checkpoint.save(out)?;
        self.log.write(&loss_csv_path(out))
    }
}

pub fn loss_csv_path(out: &Path) -> std::path::PathBuf {
    out.with_extension("loss.csv")
}

fn batch_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n)).collect()
}

fn progress_or_default(ckpt: Option<&Checkpoint>) -> Result<Progress> {
    match ckpt {
        Some(c) if c.has_section(super::model::PROGRESS) => Progress::read(c),
        _ => Ok(Progress::default()),
    }
}

fn check_same_tokenizer(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<RunConfig> {
    let stored = RunConfig::from_json(&ckpt.config)?;
    if let Some(key) = cfg.tokenizer_mismatch(&stored) {
        return config(format!("`{key}` differs from the checkpoint's tokenizer"));
    }
    Ok(stored)
}

/// Largest absolute deviation of `recon + residual` from the latent over the
/// first `count` images.
pub fn residual_identity_error(tok: &Tokenizer, images: &[ImageBuffer], count: usize) -> Result<f64> {
    let refs: Vec<&ImageBuffer> = images.iter().take(count).collect();
    let mut worst = 0.0f64;
    for f in tok.encode_batch(&refs)? {
        let q = tok.quantize(&f)?;
        let sum = q.recon.zip_map(&q.residual, |a, b| a + b)?;
        worst = worst.max(sum.max_abs_diff(&f) as f64);
    }
    Ok(worst)
}

/// Autoencoder + EMA codebook training followed by the scale-dropout phase.
/// `resume` continues an interrupted run of this stage.
pub fn stage_tokenizer(cfg: &RunConfig, resume: Option<&Checkpoint>) -> Result<StageOutput> {
    let data = Dataset::load(&cfg.train_manifest, cfg.image_size())?;
    let (mut tok, mut tr) = match resume {
        Some(c) => {
            check_same_tokenizer(cfg, c)?;
            let tok = restore_tokenizer(cfg, c)?;
            let tr = restore_tokenizer_trainer(cfg, &tok, c)?;
            (tok, tr)
        }
        None => {
            let tok = Tokenizer::new(cfg.tokenizer_config()?, cfg.seed)?;
            let tr = TokenizerTrainer::new(&tok, cfg.tokenizer_optimizer());
            (tok, tr)
        }
    };
    let main = cfg.tokenizer_iterations as u64;
    let total = main + cfg.dropout_iterations as u64;
    let mut log = LossLog::new(&["phase", "loss", "recon"]);
    while tr.step < total {
        let step = tr.step;
        let mut rng = Rng::derive(cfg.seed, "tokenizer.step", step);
        let idx = batch_indices(data.len(), cfg.tokenizer_batch, &mut rng);
        let batch: Vec<&ImageBuffer> = idx.iter().map(|&i| &data.images[i]).collect();
        if step < main {
            let st = tr.train_step(&mut tok, &batch, &mut rng)?;
            log.push(step, vec![0.0, st.loss, st.recon]);
        } else {
            let loss = tr.dropout_step(&mut tok, &batch, cfg.p_d, &mut rng)?;
            log.push(step, vec![1.0, loss, loss]);
        }
        if cfg.log_every > 0 && (step + 1) % cfg.log_every as u64 == 0 {
            let (_, v) = log.rows.last().expect("row just pushed");
            info!("tokenizer {}/{total}: loss {:.5}", step + 1, v[1]);
        }
    }
    let err = residual_identity_error(&tok, &data.images, 8)?;
    if err > 1e-5 {
        return Err(VarsrError::Internal(format!("residual identity off by {err:e} after training")));
    }
    info!("residual identity holds on 8 latents (max error {err:e})");

    let mut progress = progress_or_default(resume)?;
    progress.tokenizer = tr.step;
    let mut ckpt = Checkpoint::new(cfg.to_json());
    ckpt.put(tokenizer_section(&tok));
    ckpt.put(tokenizer_trainer_section(&tok, &tr));
    ckpt.put(progress.section());
    Ok(StageOutput { checkpoint: ckpt, log })
}

/// One training target: its token pyramid and continuous residual.
#[derive(Clone, Debug)]
pub struct Target {
    pub pyramid: TokenPyramid,
    pub residual: Tensor<f32>,
}

pub fn encode_targets(tok: &Tokenizer, images: &[&ImageBuffer]) -> Result<Vec<Target>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        for f in tok.encode_batch(chunk)? {
            let q = tok.quantize(&f)?;
            out.push(Target {
                pyramid: q.pyramid,
                residual: q.residual,
            });
        }
    }
    Ok(out)
}

/// Optimizer progress of the transformer stages.
#[derive(Clone, Debug)]
struct NetTrainer {
    state: OptimizerState<f32>,
}

impl NetTrainer {
    fn start(nets: &Networks, resume: Option<&Checkpoint>) -> Result<Self> {
        let state = match resume {
            Some(c) => c.section(OPTIMIZER)?.read_optimizer("", &nets.store)?,
            None => OptimizerState::new(&nets.store),
        };
        Ok(Self { state })
    }

    fn section(&self, nets: &Networks) -> super::checkpoint::Section {
        let mut s = super::checkpoint::Section::new(OPTIMIZER);
        s.push_optimizer("", &nets.store, &self.state);
        s
    }
}

/// Losses of one transformer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetStepStats {
    pub token_ce: f64,
    pub diffusion: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Samples conditioned on the negative quality embedding.
    pub negatives: usize,
}

/// One step of `CE + λ·L_diff` on a batch. With `λ = 0` the diffusion term is
/// not built, so the refiner receives no gradient.
fn net_step(
    cfg: &RunConfig,
    nets: &mut Networks,
    trainer: &mut NetTrainer,
    targets: &[&Target],
    conds: &[Condition],
    rng: &mut Rng,
) -> Result<NetStepStats> {
    let mut g = Graph::new();
    let pyramids: Vec<&TokenPyramid> = targets.iter().map(|t| &t.pyramid).collect();
    let fwd = nets.arm.forward_train(&mut g, &nets.store, &pyramids, conds)?;
    let ce = token_loss(&mut g, fwd.logits, &fwd.targets)?;
    let (loss, diffusion) = if cfg.lambda > 0.0 {
        let (rows, cols) = (targets[0].residual.shape()[0], targets[0].residual.shape()[1]);
        let mut z = Vec::with_capacity(targets.len() * rows * cols);
        for t in targets {
            z.extend_from_slice(t.residual.data());
        }
        let z = Tensor::new(&[targets.len() * rows, cols], z)?;
        let diff = nets.refiner.loss(&mut g, &nets.store, fwd.x_k, &z, rng)?;
        let weighted = g.scale(diff, cfg.lambda);
        (g.add(ce, weighted)?, g.scalar_value(diff) as f64)
    } else {
        (ce, 0.0)
    };
    let total = g.scalar_value(loss) as f64;
    if !total.is_finite() {
        return Err(VarsrError::Generation(format!("non-finite training loss {total}")));
    }
    let mut grads = g.backward(loss)?.params(nets.store.len());
    let grad_norm = if cfg.grad_clip > 0.0 {
        grads.clip_global_norm(cfg.grad_clip)
    } else {
        grads.global_norm()
    };
    cfg.optimizer().step(&mut nets.store, &grads, &mut trainer.state)?;
    Ok(NetStepStats {
        token_ce: g.scalar_value(ce) as f64,
        diffusion,
        total,
        grad_norm,
        negatives: conds.iter().filter(|c| c.quality() == QualityLabel::Negative).count(),
    })
}

const NET_COLUMNS: [&str; 5] = ["token_ce", "diffusion", "total", "grad_norm", "negatives"];

fn log_row(log: &mut LossLog, step: u64, st: &NetStepStats) {
    log.push(
        step,
        vec![st.token_ce, st.diffusion, st.total, st.grad_norm, st.negatives as f64],
    );
}

fn net_checkpoint(cfg: &RunConfig, tok: &Tokenizer, nets: &Networks, tr: &NetTrainer, progress: Progress) -> Checkpoint {
    let mut ckpt = Checkpoint::new(cfg.to_json());
    ckpt.put(tokenizer_section(tok));
    for s in nets.sections() {
        ckpt.put(s);
    }
    ckpt.put(tr.section(nets));
    ckpt.put(progress.section());
    ckpt
}

/// Class-conditional next-scale training from a tokenizer checkpoint, or
/// continuation of an interrupted pretraining run.
pub fn stage_pretrain(cfg: &RunConfig, input: &Checkpoint) -> Result<StageOutput> {
    check_same_tokenizer(cfg, input)?;
    let mut progress = progress_or_default(Some(input))?;
    if progress.finetune > 0 {
        return config("checkpoint is already fine-tuned");
    }
    let tok = restore_tokenizer(cfg, input)?;
    let data = Dataset::load(&cfg.train_manifest, cfg.image_size())?;
    if let Some(&c) = data.classes.iter().find(|&&c| c >= cfg.classes) {
        return config(format!("manifest class {c} outside the {} configured classes", cfg.classes));
    }
    let refs: Vec<&ImageBuffer> = data.images.iter().collect();
    let targets = encode_targets(&tok, &refs)?;
    let resuming = progress.pretrain > 0;
    let mut nets = if resuming {
        Networks::restore(cfg, &tok, input)?
    } else {
        Networks::new(cfg, &tok)?
    };
    if !resuming {
        let residuals: Vec<Tensor<f32>> = targets.iter().map(|t| t.residual.clone()).collect();
        let (_, std) = mean_std(&residuals);
        let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        nets.refiner.set_z_scale(&mut nets.store, scale)?;
        info!("residual std {std:.5}, refiner input scale {scale:.3}");
    }
    let mut trainer = NetTrainer::start(&nets, resuming.then_some(input))?;
    let mut log = LossLog::new(&NET_COLUMNS);
    let total = cfg.pretrain_iterations as u64;
    while progress.pretrain < total {
        let step = progress.pretrain;
        let mut rng = Rng::derive(cfg.seed, "pretrain.step", step);
        let idx = batch_indices(data.len(), cfg.batch_size, &mut rng);
        let batch: Vec<&Target> = idx.iter().map(|&i| &targets[i]).collect();
        let conds: Vec<Condition> = idx
            .iter()
            .map(|&i| Condition::Class {
                class: data.classes[i],
                quality: data.qualities[i],
            })
            .collect();
        let st = net_step(cfg, &mut nets, &mut trainer, &batch, &conds, &mut rng)?;
        log_row(&mut log, step, &st);
        progress.pretrain += 1;
        if cfg.log_every > 0 && progress.pretrain % cfg.log_every as u64 == 0 {
            info!(
                "pretrain {}/{total}: ce {:.4} diff {:.4}",
                progress.pretrain, st.token_ce, st.diffusion
            );
        }
    }
    Ok(StageOutput {
        checkpoint: net_checkpoint(cfg, &tok, &nets, &trainer, progress),
        log,
    })
}

/// LR–HR training pairs with quality labels. Entries the manifest marks as
/// negative keep their image as the target; positive entries turn negative
/// with the configured probability.
pub fn build_pairs(cfg: &RunConfig, data: &Dataset) -> Result<Vec<PairedSample>> {
    let params = cfg.degradation();
    data.images
        .iter()
        .enumerate()
        .map(|(i, hr)| match data.qualities[i] {
            QualityLabel::Positive => make_pair(hr, data.classes[i], &params, cfg.negative_fraction, i as u64),
            QualityLabel::Negative => {
                let lr = degrade(hr, &params, &mut params.sample_rng(i as u64))?;
                Ok(PairedSample {
                    hr: hr.clone(),
                    lr,
                    quality: QualityLabel::Negative,
                    class_id: data.classes[i],
                })
            }
        })
        .collect()
}

/// LR-prefix fine-tuning of a pretrained checkpoint, or continuation of an
/// interrupted fine-tuning run.
pub fn stage_finetune(cfg: &RunConfig, input: &Checkpoint) -> Result<StageOutput> {
    check_same_tokenizer(cfg, input)?;
    let stored = RunConfig::from_json(&input.config)?;
    if let Some(key) = cfg.network_mismatch(&stored) {
        return config(format!("`{key}` differs from the pretrained checkpoint"));
    }
    let mut progress = progress_or_default(Some(input))?;
    let tok = restore_tokenizer(cfg, input)?;
    let mut nets = Networks::restore(cfg, &tok, input)?;
    let data = Dataset::load(&cfg.train_manifest, cfg.image_size())?;
    let pairs = build_pairs(cfg, &data)?;
    let refs: Vec<&ImageBuffer> = pairs.iter().map(|p| &p.hr).collect();
    let targets = encode_targets(&tok, &refs)?;
    let negatives = pairs.iter().filter(|p| p.quality == QualityLabel::Negative).count();
    info!("{} training pairs, {negatives} negative", pairs.len());
    // Optimizer moments carry over only when continuing this stage.
    let mut trainer = NetTrainer::start(&nets, (progress.finetune > 0).then_some(input))?;
    let mut log = LossLog::new(&NET_COLUMNS);
    let total = cfg.finetune_iterations as u64;
    while progress.finetune < total {
        let step = progress.finetune;
        let mut rng = Rng::derive(cfg.seed, "finetune.step", step);
        let idx = batch_indices(pairs.len(), cfg.batch_size, &mut rng);
        let batch: Vec<&Target> = idx.iter().map(|&i| &targets[i]).collect();
        let conds: Vec<Condition> = idx
            .iter()
            .map(|&i| Condition::Image {
                lr: &pairs[i].lr,
                quality: pairs[i].quality,
            })
            .collect();
        let st = net_step(cfg, &mut nets, &mut trainer, &batch, &conds, &mut rng)?;
        log_row(&mut log, step, &st);
        progress.finetune += 1;
        if cfg.log_every > 0 && progress.finetune % cfg.log_every as u64 == 0 {
            info!(
                "finetune {}/{total}: ce {:.4} diff {:.4}",
                progress.finetune, st.token_ce, st.diffusion
            );
        }
    }
    Ok(StageOutput {
        checkpoint: net_checkpoint(cfg, &tok, &nets, &trainer, progress),
        log,
    })
}
