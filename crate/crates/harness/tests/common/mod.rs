#![allow(dead_code)]

use std::path::Path;

use cankd_harness::ExperimentConfig;

/// A config that trains in well under a second: 16x16 images, narrow nets,
/// a handful of samples and epochs.
pub fn tiny_config(out_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs = 3;
    cfg.batch_size = 3;
    cfg.optimizer.step_epochs = vec![2];
    cfg.teacher.widths = vec![4, 8, 8];
    cfg.teacher.pretrain_epochs = 2;
    cfg.teacher.step_epochs = vec![];
    cfg.student.widths = vec![2, 4, 4];
    cfg.dataset.height = 16;
    cfg.dataset.width = 16;
    cfg.dataset.train_size = 7;
    cfg.dataset.val_size = 4;
    cfg.output.out_dir = out_dir.to_path_buf();
    cfg
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
