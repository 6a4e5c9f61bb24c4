//! The `cankd` binary: config loading, overrides and exit codes.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use cankd_harness::metrics::{read_metrics, METRICS_FILE};
use cankd_harness::ExperimentConfig;
use common::tiny_config;
use tempfile::tempdir;

fn cankd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cankd")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn default_config_parses_back() {
    let out = cankd(&["default-config"]);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_toml_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn run_applies_overrides() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("ignored"));
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("run");
    let out = cankd(&[
        "run",
        "--config",
        &path,
        "--epochs",
        "2",
        "--mu",
        "2.5",
        "--affinity",
        "embedded_gaussian",
        "--pool-scale",
        "4",
        "--residual",
        "false",
        "--seed",
        "5",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_metrics(&out_dir.join(METRICS_FILE)).unwrap().len(), 4);
    let used = ExperimentConfig::load(&out_dir.join("config.toml")).unwrap();
    assert_eq!((used.epochs, used.seed, used.distill.mu), (2, 5, 2.5));
    assert_eq!((used.distill.pool_scale, used.distill.residual), (4, false));
    assert_eq!(format!("{:?}", used.distill.affinity), "EmbeddedGaussian");
    assert!(!dir.path().join("ignored").exists());

    // a second run reuses the teacher through --teacher-ckpt
    let again = dir.path().join("again");
    let out = cankd(&[
        "run",
        "--config",
        &path,
        "--epochs",
        "1",
        "--teacher-ckpt",
        out_dir.join("teacher.ckpt").to_str().unwrap(),
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!again.join("teacher.ckpt").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\nseed = 0\nepochs = 1\nbatch_size = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(cankd(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let cfg = tiny_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    assert_eq!(cankd(&["run", "--config", &path, "--pool-scale", "3"]).status.code(), Some(2));
    assert_eq!(cankd(&["ablate", "--config", &path, "--sweep", "depth"]).status.code(), Some(2));
}

#[test]
fn io_errors_exit_with_4() {
    let dir = tempdir().unwrap();
    assert_eq!(cankd(&["run", "--config", dir.path().join("none.toml").to_str().unwrap()]).status.code(), Some(4));
    let ckpt = dir.path().join("x.ckpt");
    std::fs::write(&ckpt, b"NOTACKPT0000").unwrap();
    let out = cankd(&["inspect", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn nan_loss_exits_with_3() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(&dir.path().join("run"));
    cfg.teacher.pretrain_epochs = 1;
    cfg.optimizer.learning_rate = 1e200;
    let path = write_config(dir.path(), &cfg);
    assert_eq!(cankd(&["run", "--config", &path]).status.code(), Some(3));
}

#[test]
fn teacher_and_inspect_subcommands() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    let out = cankd(&["teacher", "--config", &path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cankd(&["inspect", dir.path().join("teacher.ckpt").to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("stage0.w") && text.contains("4x3x3x3"));
    assert!(text.contains("round-trip exact"), "{text}");
}
