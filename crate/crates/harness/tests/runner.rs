//! End-to-end runs on a tiny configuration: outputs, determinism and errors.

mod common;

use cankd_harness::checkpoint::{load_checkpoint, save_checkpoint};
use cankd_harness::error::exit_code;
use cankd_harness::metrics::{read_metrics, METRICS_FILE, SUMMARY_FILE};
use cankd_harness::runner::{CONFIG_COPY, STUDENT_CHECKPOINT, TEACHER_CHECKPOINT, TEACHER_METRICS};
use cankd_harness::{prepare_context, run_experiment, run_student, ExperimentConfig, HarnessError, Split};
use common::{read, tiny_config};
use tempfile::tempdir;

#[test]
fn run_writes_every_output() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let outcome = run_experiment(&cfg).unwrap();
    for f in [METRICS_FILE, SUMMARY_FILE, STUDENT_CHECKPOINT, TEACHER_CHECKPOINT, TEACHER_METRICS, CONFIG_COPY] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows, outcome.rows);
    assert_eq!(rows.len(), 2 * cfg.epochs);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.epoch, i / 2 + 1);
        assert_eq!(r.split, if i % 2 == 0 { Split::Train } else { Split::Val });
        assert!((0.0..=1.0).contains(&r.pixel_accuracy) && (0.0..=1.0).contains(&r.mean_iou));
        assert!(r.feat_loss > 0.0 && r.task_loss > 0.0);
        assert!((r.total_loss - (r.task_loss + 5.0 * r.feat_loss)).abs() < 1e-9 * r.total_loss);
        assert_eq!(r.wall_seconds, 0.0);
    }
    // step after epoch 2 of 3
    let lrs: Vec<f64> = rows.iter().step_by(2).map(|r| r.learning_rate).collect();
    assert_eq!(lrs, vec![0.02, 0.02, 0.02 * 0.1]);

    let summary = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(2).unwrap().starts_with("3,val,"));

    let copied = ExperimentConfig::load(&dir.path().join(CONFIG_COPY)).unwrap();
    assert_eq!(copied, cfg);

    let ckpt = load_checkpoint(&dir.path().join(STUDENT_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.sub_store("student"), outcome.student.params);
    assert_eq!(ckpt.sub_store("distill"), outcome.distill_params);
    // student tap channels (4) differ from the teacher's (8): both levels are aligned
    assert!(ckpt.contains("distill.level0.align") && ckpt.contains("distill.level1.align"));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    run_experiment(&tiny_config(a.path())).unwrap();
    run_experiment(&tiny_config(b.path())).unwrap();
    for f in [METRICS_FILE, SUMMARY_FILE, STUDENT_CHECKPOINT, TEACHER_CHECKPOINT] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn zero_mu_matches_disabled_distillation_byte_for_byte() {
    let (a, b, c) = (tempdir().unwrap(), tempdir().unwrap(), tempdir().unwrap());
    let mut zero = tiny_config(a.path());
    zero.distill.mu = 0.0;
    let mut off = tiny_config(b.path());
    off.distill.enabled = false;
    run_experiment(&zero).unwrap();
    run_experiment(&off).unwrap();
    assert_eq!(read(&a.path().join(METRICS_FILE)), read(&b.path().join(METRICS_FILE)));
    assert_eq!(read(&a.path().join(SUMMARY_FILE)), read(&b.path().join(SUMMARY_FILE)));

    // and the feature term does change training when weighted
    run_experiment(&tiny_config(c.path())).unwrap();
    assert_ne!(read(&a.path().join(METRICS_FILE)), read(&c.path().join(METRICS_FILE)));
}

#[test]
fn seed_changes_the_run() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    run_experiment(&tiny_config(a.path())).unwrap();
    let mut cfg = tiny_config(b.path());
    cfg.seed = 1;
    run_experiment(&cfg).unwrap();
    assert_ne!(read(&a.path().join(METRICS_FILE)), read(&b.path().join(METRICS_FILE)));
}

#[test]
fn loaded_teacher_reproduces_pretrained_features() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let resolved = cfg.validate().unwrap();
    let ckpt = dir.path().join("t.ckpt");
    let fresh = prepare_context(&cfg, &resolved, &ckpt).unwrap();
    assert_eq!(fresh.teacher.pretrain_rows.len(), 2 * cfg.teacher.pretrain_epochs);
    let loaded = prepare_context(&cfg, &resolved, &ckpt).unwrap();
    assert!(loaded.teacher.pretrain_rows.is_empty());
    assert_eq!(fresh.teacher.net, loaded.teacher.net);
    assert_eq!(fresh.teacher.train_features(), loaded.teacher.train_features());
    assert_eq!(fresh.teacher.val_features(), loaded.teacher.val_features());

    // two arms on one context see the same teacher and data
    let mut arm = cfg.clone();
    arm.distill.residual = false;
    arm.output.out_dir = dir.path().join("arm");
    let out = run_student(&arm, &loaded).unwrap();
    assert_eq!(out.rows.len(), 2 * cfg.epochs);
}

#[test]
fn arms_on_a_shared_context_use_their_own_settings() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ctx = prepare_context(&cfg, &cfg.validate().unwrap(), &dir.path().join("t.ckpt")).unwrap();
    let arm = |mu: f64| {
        let mut c = cfg.clone();
        c.distill.mu = mu;
        c.output.out_dir = dir.path().join(format!("mu{mu}"));
        run_student(&c, &ctx).unwrap().rows
    };
    let (off, on) = (arm(0.0), arm(5.0));
    assert_eq!(off[0].total_loss, off[0].task_loss);
    assert_ne!(on[0].total_loss, on[0].task_loss);
    assert_ne!(off.last().unwrap().task_loss, on.last().unwrap().task_loss);
}

#[test]
fn context_for_another_seed_is_rejected() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let resolved = cfg.validate().unwrap();
    let ctx = prepare_context(&cfg, &resolved, &dir.path().join("t.ckpt")).unwrap();
    let other = ExperimentConfig { seed: 9, ..cfg };
    assert!(matches!(run_student(&other, &ctx), Err(HarnessError::ConfigInvalid(_))));
}

#[test]
fn missing_teacher_without_pretraining_is_an_io_error() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.teacher.pretrain = false;
    cfg.teacher.checkpoint = Some(dir.path().join("absent.ckpt"));
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::CheckpointMissing(_)), "{err}");
    assert_eq!(err.exit_code(), exit_code::IO);
    assert!(!dir.path().join(METRICS_FILE).exists());
}

#[test]
fn teacher_checkpoint_of_wrong_layout_is_a_config_error() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("student_as_teacher.ckpt");
    let student = cankd_core::ToyNet64::init(
        cankd_core::toy::ToyNetSpec::new(vec![2, 4, 4], 4, vec![1, 2]).unwrap(),
        &mut rand::rngs::mock::StepRng::new(1, 1),
    )
    .unwrap();
    save_checkpoint(&student.params, &ckpt).unwrap();
    cfg.teacher.checkpoint = Some(ckpt);
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::Model { .. }), "{err}");
    assert_eq!(err.exit_code(), exit_code::CONFIG);
}

#[test]
fn corrupt_teacher_checkpoint_is_reported() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"CANKD\0\0\x01\x05").unwrap();
    cfg.teacher.checkpoint = Some(ckpt);
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::Checkpoint { .. }), "{err}");
    assert_eq!(err.exit_code(), exit_code::IO);
}

#[test]
fn divergent_training_stops_with_numerical_error() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.teacher.pretrain_epochs = 1;
    cfg.optimizer.learning_rate = 1e200;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), exit_code::NUMERICAL);
}

#[test]
fn wall_time_is_recorded_only_on_request() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.epochs = 1;
    cfg.output.record_wall_time = true;
    let out = run_experiment(&cfg).unwrap();
    assert!(out.rows.iter().all(|r| r.wall_seconds > 0.0));
}
