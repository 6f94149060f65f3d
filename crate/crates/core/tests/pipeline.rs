mod common;

use std::path::Path;

use varsr::pipeline::{
    evaluate, loss_csv_path, stage_finetune, stage_pretrain, stage_tokenizer, write_corpus, Checkpoint, Entry,
    RunConfig, Section, SrOptions, VarsrModel,
};
use varsr::VarsrError;
use varsr_numerics::{Rng, Tensor};

/// Tiny configuration over a freshly rendered corpus in `dir`.
fn setup(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        corpus_size: 12,
        holdout_size: 2,
        tokenizer_iterations: 3,
        dropout_iterations: 2,
        tokenizer_batch: 4,
        batch_size: 4,
        pretrain_iterations: 3,
        finetune_iterations: 3,
        log_every: 0,
        ..common::tiny_config()
    };
    let (train, holdout) = write_corpus(&cfg, dir).unwrap();
    cfg.train_manifest = train;
    cfg.eval_manifest = holdout;
    cfg
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let tok = stage_tokenizer(&cfg, None).unwrap();
    let pre = stage_pretrain(&cfg, &tok.checkpoint).unwrap();
    let bytes = pre.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, pre.checkpoint);
    assert_eq!(back.to_bytes(), bytes);
    // The optimizer moments are part of the payload.
    let opt = back.section("optimizer").unwrap();
    assert!(opt.entries.iter().any(|e| e.name.starts_with("m/")));
    assert!(opt.entries.iter().any(|e| e.name.starts_with("v/")));

    let path = dir.path().join("pre.ckpt");
    pre.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), pre.checkpoint);
    let csv = std::fs::read_to_string(loss_csv_path(&path)).unwrap();
    assert!(csv.starts_with("step,token_ce,diffusion,total,grad_norm,negatives\n"));
    assert_eq!(csv.lines().count(), 1 + cfg.pretrain_iterations);

    let model = VarsrModel::from_checkpoint(&back).unwrap();
    assert_eq!(model.nets.store, VarsrModel::from_checkpoint(&pre.checkpoint).unwrap().nets.store);
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let mut ckpt = Checkpoint::new("{\"run.seed\": 1}");
    let mut s = Section::new("demo");
    s.push(Entry::f32("w", &Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap()));
    s.push(Entry::f64("m", &[0.25, -1.5]));
    s.push(Entry::u64("step", &[42]));
    ckpt.put(s);
    let bytes = ckpt.to_bytes();
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x80] {
            let mut bad = bytes.clone();
            bad[i] ^= flip;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i} flip {flip:#x} went unnoticed");
        }
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn trained_checkpoint_corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let bytes = stage_tokenizer(&cfg, None).unwrap().checkpoint.to_bytes();
    let mut rng = Rng::new(0);
    for _ in 0..300 {
        let mut bad = bytes.clone();
        let i = rng.below(bad.len());
        bad[i] ^= 1 << rng.below(8);
        match Checkpoint::from_bytes(&bad) {
            Err(VarsrError::Checkpoint(_)) => {}
            other => panic!("byte {i}: {other:?}"),
        }
    }
}

#[test]
fn resumed_stages_match_uninterrupted_runs() {
    let dir = tempfile::tempdir().unwrap();
    let full = setup(dir.path());

    // Tokenizer: 5 steps at once against 2 + 3 (crossing into the dropout phase).
    let once = stage_tokenizer(&full, None).unwrap().checkpoint;
    let half = RunConfig {
        tokenizer_iterations: 2,
        dropout_iterations: 0,
        ..full.clone()
    };
    let first = stage_tokenizer(&half, None).unwrap().checkpoint;
    let resumed = stage_tokenizer(&full, Some(&first)).unwrap().checkpoint;
    assert_eq!(once.sections, resumed.sections);

    // Pretraining: 3 steps against 1 + 2.
    let pre = stage_pretrain(&full, &once).unwrap().checkpoint;
    let short = RunConfig {
        pretrain_iterations: 1,
        ..full.clone()
    };
    let part = stage_pretrain(&short, &once).unwrap().checkpoint;
    let cont = stage_pretrain(&full, &part).unwrap().checkpoint;
    assert_eq!(pre.sections, cont.sections);

    // Fine-tuning: 3 steps against 2 + 1.
    let ft = stage_finetune(&full, &pre).unwrap().checkpoint;
    let short = RunConfig {
        finetune_iterations: 2,
        ..full.clone()
    };
    let part = stage_finetune(&short, &pre).unwrap().checkpoint;
    let cont = stage_finetune(&full, &part).unwrap().checkpoint;
    assert_eq!(ft.sections, cont.sections);
}

#[test]
fn zero_diffusion_weight_leaves_refiner_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        lambda: 0.0,
        ..setup(dir.path())
    };
    let tok = stage_tokenizer(&cfg, None).unwrap().checkpoint;
    let untrained = stage_pretrain(
        &RunConfig {
            pretrain_iterations: 0,
            ..cfg.clone()
        },
        &tok,
    )
    .unwrap()
    .checkpoint;
    let trained = stage_pretrain(&cfg, &tok).unwrap().checkpoint;
    assert_eq!(trained.section("refiner").unwrap(), untrained.section("refiner").unwrap());
    assert_ne!(trained.section("arm").unwrap(), untrained.section("arm").unwrap());
}

#[test]
fn stage_inputs_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let missing = RunConfig {
        train_manifest: dir.path().join("nope.tsv"),
        ..cfg.clone()
    };
    assert!(matches!(stage_tokenizer(&missing, None), Err(VarsrError::Config(_))));

    let tok = stage_tokenizer(&cfg, None).unwrap().checkpoint;
    // A tokenizer-only checkpoint cannot be fine-tuned or served.
    assert!(matches!(stage_finetune(&cfg, &tok), Err(VarsrError::Config(_))));
    assert!(matches!(VarsrModel::from_checkpoint(&tok), Err(VarsrError::Config(_))));
    let other = RunConfig {
        vocab: 32,
        ..cfg.clone()
    };
    assert!(matches!(stage_pretrain(&other, &tok), Err(VarsrError::Config(_))));

    let pre = stage_pretrain(&cfg, &tok).unwrap().checkpoint;
    let wider = RunConfig {
        arm_width: 32,
        ..cfg.clone()
    };
    assert!(matches!(stage_finetune(&wider, &pre), Err(VarsrError::Config(_))));
    let ft = stage_finetune(&cfg, &pre).unwrap().checkpoint;
    assert!(matches!(stage_pretrain(&cfg, &ft), Err(VarsrError::Config(_))));

    let model = VarsrModel::from_checkpoint(&ft).unwrap();
    let opts = SrOptions::from_config(&model).unwrap();
    let report = evaluate(&model, &cfg.eval_manifest, &opts).unwrap();
    assert_eq!(report.rows.len(), cfg.holdout_size);
    assert!(report.rows.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite()));
    assert_eq!(report.ar_passes, 3);
    assert_eq!(report.refiner_steps, cfg.refiner_steps);
    assert!(matches!(
        evaluate(&model, &dir.path().join("absent.tsv"), &opts),
        Err(VarsrError::Config(_))
    ));
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(matches!(RunConfig::from_json("{\"train.lamda\": 1.0}"), Err(VarsrError::Config(_))));
    let cfg = RunConfig::from_json("{\"guidance.lambda_max\": 2.5, \"tokenizer.schedule\": [1, 2, 4]}").unwrap();
    assert_eq!(cfg.lambda_max, 2.5);
    assert_eq!(cfg.image_size(), 16);
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let bad = RunConfig {
        vocab: 0,
        ..RunConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(RunConfig::default().validate().is_ok());
}
