//! `varsr` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use varsr::data::{read_image, write_image};
use varsr::guidance::Ramp;
use varsr::pipeline::{
    bench, evaluate, stage_finetune, stage_pretrain, stage_tokenizer, super_resolve, write_corpus, Checkpoint,
    RunConfig, SrOptions, VarsrModel,
};
use varsr::{Result, VarsrError};

#[derive(Debug, Parser)]
#[command(name = "varsr", version, about = "Next-scale autoregressive super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON). Absent keys take desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `guidance.lambda_max`.
    #[arg(long = "cfg-scale", global = true)]
    cfg_scale: Option<f64>,
    /// Overrides `guidance.ramp` (linear or constant).
    #[arg(long, global = true)]
    ramp: Option<Ramp>,
    /// Picks the most likely token at every position.
    #[arg(long, global = true)]
    greedy: bool,
    /// Requires bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output file (directory for `corpus`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Renders the procedural corpus and its manifests.
    Corpus,
    /// Trains the tokenizer (or continues `--checkpoint`).
    TokenizerTrain,
    /// Class-conditional pretraining from a tokenizer checkpoint.
    Pretrain,
    /// LR-conditioned fine-tuning from a pretrained checkpoint.
    Finetune,
    /// Super-resolves one LR image.
    Sr {
        /// LR image (PNG, PPM or PGM).
        input: PathBuf,
    },
    /// Scores a checkpoint on a held-out manifest.
    Eval {
        /// Overrides `data.eval_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Reports token, attention and pass counts.
    Bench,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(VarsrError),
}
use Failure::{Runtime, Usage};

impl From<VarsrError> for Failure {
    fn from(e: VarsrError) -> Self {
        Runtime(e)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, cmd: &str) -> std::result::Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| Usage(format!("`{cmd}` requires {flag}")))
}

/// The run configuration: `--config` (paths relative to its directory) or
/// `base`, then command-line overrides.
fn load_config(cli: &Cli, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, base) {
        (Some(path), _) => {
            let mut cfg = RunConfig::load(path)?;
            cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
            cfg
        }
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(l) = cli.cfg_scale {
        cfg.lambda_max = l;
    }
    if let Some(r) = cli.ramp {
        cfg.ramp = r;
    }
    if cli.greedy {
        cfg.greedy = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a trained model; `--config` and flags may change sampling settings
/// only, since the weights fix everything else.
fn load_model(cli: &Cli, cmd: &str) -> std::result::Result<VarsrModel, Failure> {
    let path = required(&cli.checkpoint, "--checkpoint", cmd)?;
    let mut model = VarsrModel::load(path)?;
    let cfg = load_config(cli, Some(model.config.clone()))?;
    if let Some(key) = cfg.network_mismatch(&model.config) {
        return Err(Runtime(VarsrError::Config(format!("`{key}` differs from the checkpoint"))));
    }
    let stored = model.config.clone();
    model.config = RunConfig {
        eval_manifest: cfg.eval_manifest.clone(),
        seed: cfg.seed,
        lambda_max: cfg.lambda_max,
        ramp: cfg.ramp,
        guide_refiner: cfg.guide_refiner,
        greedy: cfg.greedy,
        temperature: cfg.temperature,
        top_k: cfg.top_k,
        blur_sigma: cfg.blur_sigma,
        noise_sigma: cfg.noise_sigma,
        degrade_seed: cfg.degrade_seed,
        ..stored
    };
    Ok(model)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| VarsrError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| VarsrError::io(path, e))
}

/// Writes the effective configuration next to an output file.
fn write_config_sidecar(out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    write_text(Path::new(&name), &cfg.to_json())
}

fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    if cli.deterministic {
        // Every kernel runs on one thread in a fixed order, so runs are
        // reproducible from the seed alone.
        info!("deterministic mode");
    }
    match &cli.command {
        Command::Corpus => {
            let out = required(&cli.out, "--out", "corpus")?;
            let cfg = load_config(cli, None)?;
            let (train, holdout) = write_corpus(&cfg, out)?;
            write_config_sidecar(&out.join("corpus"), &cfg)?;
            println!("train manifest: {}", train.display());
            println!("holdout manifest: {}", holdout.display());
        }
        Command::TokenizerTrain => {
            let out = required(&cli.out, "--out", "tokenizer-train")?;
            let cfg = load_config(cli, None)?;
            let resume = cli.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let stage = stage_tokenizer(&cfg, resume.as_ref())?;
            stage.save(out)?;
            write_config_sidecar(out, &cfg)?;
            println!("wrote {}", out.display());
        }
        Command::Pretrain | Command::Finetune => {
            let finetune = matches!(cli.command, Command::Finetune);
            let cmd = if finetune { "finetune" } else { "pretrain" };
            let out = required(&cli.out, "--out", cmd)?;
            let input_path = required(&cli.checkpoint, "--checkpoint", cmd)?;
            if !input_path.exists() {
                return Err(Runtime(VarsrError::Config(format!(
                    "input checkpoint {} not found",
                    input_path.display()
                ))));
            }
            let input = Checkpoint::load(input_path)?;
            let cfg = load_config(cli, None)?;
            let stage = if finetune {
                stage_finetune(&cfg, &input)?
            } else {
                stage_pretrain(&cfg, &input)?
            };
            stage.save(out)?;
            write_config_sidecar(out, &cfg)?;
            println!("wrote {}", out.display());
        }
        Command::Sr { input } => {
            let out = required(&cli.out, "--out", "sr")?;
            let model = load_model(cli, "sr")?;
            let lr = read_image(input)?;
            let opts = SrOptions::from_config(&model)?;
            let res = super_resolve(&model, &lr, &opts)?;
            write_image(out, &res.image)?;
            println!(
                "wrote {} ({} transformer passes, {} refiner steps)",
                out.display(),
                res.ar_passes,
                res.refiner_steps
            );
        }
        Command::Eval { manifest } => {
            let out = required(&cli.out, "--out", "eval")?;
            let model = load_model(cli, "eval")?;
            let manifest = manifest.clone().unwrap_or_else(|| model.config.eval_manifest.clone());
            let opts = SrOptions::from_config(&model)?;
            let report = evaluate(&model, &manifest, &opts)?;
            write_text(out, &report.to_csv())?;
            write_config_sidecar(out, &model.config)?;
            println!(
                "{} images: PSNR {:.3} dB (bicubic {:.3}, {:+.3}), SSIM {:.4} (bicubic {:.4}, {:+.4}); {} parameters",
                report.rows.len(),
                report.mean_psnr,
                report.mean_bicubic_psnr,
                report.psnr_gain(),
                report.mean_ssim,
                report.mean_bicubic_ssim,
                report.ssim_gain(),
                report.parameters
            );
        }
        Command::Bench => {
            let out = required(&cli.out, "--out", "bench")?;
            let model = load_model(cli, "bench")?;
            let opts = SrOptions::from_config(&model)?;
            let report = bench(&model, &opts)?;
            write_text(out, &report.to_csv())?;
            write_config_sidecar(out, &model.config)?;
            let tokens: Vec<String> = report.desk.iter().map(|c| c.tokens.to_string()).collect();
            println!(
                "tokens per scale ({}) -> {}; {} forward passes; {} refiner steps; {} parameters",
                tokens.join(","),
                report.total_tokens(),
                report.forward_passes,
                report.refiner_steps,
                report.parameters
            );
            if report.forward_passes != report.desk.len() {
                warn!("forward passes differ from the number of scales");
            }
        }
    }
    Ok(())
}
