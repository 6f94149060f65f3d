//! Training stages, inference, evaluation, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod model;
pub mod train;

use std::path::{Path, PathBuf};

use crate::data::{generate_corpus, write_image, write_manifest, ManifestEntry, QualityLabel};
use crate::error::{Result, VarsrError};

pub use checkpoint::{fnv1a64, Checkpoint, Entry, Payload, Section};
pub use config::RunConfig;
pub use infer::{bench, evaluate, scale_costs, super_resolve, BenchReport, EvalReport, EvalRow, ScaleCost, SrOptions, SrOutput};
pub use model::{Networks, Progress, VarsrModel};
pub use train::{
    build_pairs, encode_targets, loss_csv_path, residual_identity_error, stage_finetune, stage_pretrain,
    stage_tokenizer, Dataset, LossLog, NetStepStats, StageOutput, Target,
};

/// Renders the procedural corpus into `dir`: `train/` and `holdout/` PNGs
/// plus `train.tsv` and `holdout.tsv`. Returns the two manifest paths.
pub fn write_corpus(cfg: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let n = cfg.corpus_size + cfg.holdout_size;
    let images = generate_corpus(n, cfg.classes, cfg.image_size(), cfg.seed)?;
    std::fs::create_dir_all(dir).map_err(|e| VarsrError::io(dir, e))?;
    let mut train = Vec::with_capacity(cfg.corpus_size);
    let mut holdout = Vec::with_capacity(cfg.holdout_size);
    for (i, (img, class_id)) in images.iter().enumerate() {
        let (sub, list) = if i < cfg.corpus_size {
            ("train", &mut train)
        } else {
            ("holdout", &mut holdout)
        };
        let path = dir.join(sub).join(format!("{i:05}.png"));
        write_image(&path, img)?;
        list.push(ManifestEntry {
            path,
            class_id: *class_id,
            quality: QualityLabel::Positive,
        });
    }
    let train_path = dir.join("train.tsv");
    let holdout_path = dir.join("holdout.tsv");
    write_manifest(&train_path, &train)?;
    write_manifest(&holdout_path, &holdout)?;
    Ok((train_path, holdout_path))
}
