//! End-to-end tests of the command-line surface via the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sudolm")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("sudolm_cli_test").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("SUDOLM_SEED")
        .output()
        .expect("binary runs")
}

#[test]
fn keygen_writes_ten_ids() {
    let dir = tmp("keygen");
    let out_path = dir.join("key.txt");
    let out = run(&[
        "keygen",
        "--seed",
        "7",
        "--length",
        "10",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = std::fs::read_to_string(&out_path).unwrap();
    let ids: Vec<u32> = text.split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(ids.len(), 10);
    // the frozen golden vector for seed 7
    assert_eq!(ids, vec![215, 28, 2, 203, 218, 17, 246, 254, 97, 105]);
}

#[test]
fn align_without_sft_checkpoint_fails_with_exit_1() {
    let dir = tmp("align_missing");
    // prepare world artifacts but no sft checkpoint
    let world = run(&[
        "world",
        "--seed",
        "3",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(world.status.success(), "{world:?}");
    let keygen = run(&[
        "keygen",
        "--seed",
        "3",
        "--out",
        dir.join("key.txt").to_str().unwrap(),
    ]);
    assert!(keygen.status.success());

    let out = run(&["align", "--seed", "3", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("sft.ckpt"),
        "error should name the missing reference checkpoint, got: {stderr}"
    );
}

#[test]
fn eval_without_world_fails_with_exit_1() {
    let dir = tmp("eval_missing");
    let out = run(&["eval", "--seed", "3", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn invalid_config_fails_with_exit_1() {
    let dir = tmp("bad_config");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"split": {"fraction": 2.0}}"#).unwrap();
    let out = run(&[
        "world",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn seed_env_var_is_a_fallback() {
    let dir_env = tmp("seed_env");
    let out = Command::new(bin())
        .args(["world", "--out-dir", dir_env.to_str().unwrap()])
        .env("SUDOLM_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");

    let dir_flag = tmp("seed_flag");
    let out = run(&["world", "--seed", "99", "--out-dir", dir_flag.to_str().unwrap()]);
    assert!(out.status.success());

    // env fallback and explicit flag produce the same world
    let a = std::fs::read(dir_env.join("world.jsonl")).unwrap();
    let b = std::fs::read(dir_flag.join("world.jsonl")).unwrap();
    assert_eq!(a, b);

    // but the flag wins over the environment
    let dir_both = tmp("seed_both");
    let out = Command::new(bin())
        .args([
            "world",
            "--seed",
            "3",
            "--out-dir",
            dir_both.to_str().unwrap(),
        ])
        .env("SUDOLM_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let c = std::fs::read(dir_both.join("world.jsonl")).unwrap();
    assert_ne!(a, c);
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{
  "seed": 5,
  "out_dir": "{}",
  "world": {{"n_entities": 8, "attrs_per_entity": 3}},
  "model": {{"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "context_len": 64}},
  "sft": {{"epochs": 2, "lr": 0.0003, "batch_size": 8}},
  "align": {{"epochs": 1, "lr": 0.0001, "beta": 0.1, "batch_size": 8, "holdout_fraction": 0.0}},
  "attack": {{"lengths": [5, 10], "keys_per_length": 1, "max_new": 4}},
  "eval": {{"max_new": 6}}
}}"#,
            dir.display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn staged_subcommands_compose_into_a_full_run() {
    let dir = tmp("staged");
    let cfg = tiny_config(&dir);
    let cfg = cfg.to_str().unwrap();
    // stage by stage: each consumes the previous stage's artifacts
    let keygen = run(&[
        "keygen",
        "--seed",
        "5",
        "--out",
        dir.join("key.txt").to_str().unwrap(),
    ]);
    assert!(keygen.status.success(), "keygen failed: {keygen:?}");
    for stage in ["world", "sft", "align", "eval", "attack", "report"] {
        let out = run(&[stage, "--config", cfg]);
        assert!(out.status.success(), "{stage} failed: {out:?}");
    }
    // pipeline produced every artifact
    for artifact in [
        "run_config.json",
        "key.txt",
        "vocab.tsv",
        "world.jsonl",
        "split.json",
        "preference.jsonl",
        "sft.ckpt",
        "aligned.ckpt",
        "eval_report.json",
        "verdicts.csv",
        "utility.json",
        "attack.csv",
        "report.txt",
    ] {
        assert!(dir.join(artifact).exists(), "missing artifact {artifact}");
    }
    // rerunning a single stage on existing artifacts succeeds and the
    // report renders the three sections
    let out = run(&["report", "--config", cfg]);
    assert!(out.status.success());
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("access control"));
    assert!(report.contains("vanilla"));
    assert!(report.contains("anchor"));
    assert!(report.contains("key guessing"));
}

#[test]
fn eval_rejects_checkpoint_from_other_vocabulary() {
    let dir = tmp("hash_check");
    let cfg = tiny_config(&dir);
    let out = run(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");

    // corrupt the vocabulary artifact: evaluation must refuse to pair the
    // checkpoint with a different vocabulary
    let vocab_path = dir.join("vocab.tsv");
    let mut vocab = std::fs::read_to_string(&vocab_path).unwrap();
    vocab = vocab.replacen("[PAD]", "[XXX]", 1);
    std::fs::write(&vocab_path, vocab).unwrap();
    let out = run(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("hash"), "stderr: {stderr}");
}
