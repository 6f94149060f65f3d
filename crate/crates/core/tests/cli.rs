mod common;

use std::path::Path;
use std::process::Command;

use common::criteria::{run_all_commands, tiny_cli_config, varsr_bin};

fn status(dir: &Path, args: &[&str]) -> i32 {
    Command::new(varsr_bin())
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(status(d, &["--help"]), 0);
    assert_eq!(status(d, &[]), 1);
    assert_eq!(status(d, &["no-such-command"]), 1);
    assert_eq!(status(d, &["corpus"]), 1, "missing --out");
    assert_eq!(status(d, &["pretrain", "--out", "x.ckpt"]), 1, "missing --checkpoint");
    assert_eq!(status(d, &["sr", "--out", "x.png"]), 1, "missing input");
    assert_eq!(status(d, &["--seed", "abc", "bench"]), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), "{\"no.such.key\": 1}").unwrap();
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(status(d, &["--config", "missing.json", "corpus", "--out", "c"]), 2);
    assert_eq!(status(d, &["--config", "bad.json", "corpus", "--out", "c"]), 2);
    assert_eq!(status(d, &["pretrain", "--checkpoint", "absent.ckpt", "--out", "p.ckpt"]), 2);
    assert_eq!(status(d, &["bench", "--checkpoint", "junk.ckpt", "--out", "b.csv"]), 2);
    assert_eq!(status(d, &["--cfg-scale=-1", "corpus", "--out", "c"]), 2);
}

#[test]
fn full_command_chain_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    run_all_commands(dir.path(), 3).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.lines().count() > 2);
}

#[test]
fn config_paths_resolve_against_the_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("runs");
    std::fs::create_dir(&sub).unwrap();
    std::fs::write(sub.join("tiny.json"), tiny_cli_config()).unwrap();
    // Run from the parent directory; manifests named in the config live under runs/.
    assert_eq!(status(dir.path(), &["--config", "runs/tiny.json", "corpus", "--out", "runs/corpus"]), 0);
    assert_eq!(status(dir.path(), &["--config", "runs/tiny.json", "tokenizer-train", "--out", "tok.ckpt"]), 0);
}
