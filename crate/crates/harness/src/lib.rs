//! Experiment harness for Can-block feature distillation on the toy
//! pixel-labelling task: config loading, teacher pretraining, student runs,
//! ablation sweeps, metrics and checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod runner;

pub use ablation::{run_ablation, AblationReport, ArmSetting, Sweep};
pub use config::{ExperimentConfig, Overrides};
pub use error::{HarnessError, Result};
pub use metrics::{MetricsRow, Split};
pub use runner::{prepare_context, run_experiment, run_student, RunOutcome, SeedContext};
