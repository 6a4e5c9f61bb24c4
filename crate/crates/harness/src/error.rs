use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

/// Process exit codes of the `cankd` binary.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("failed to parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    /// A core error raised while building a run, with the config context.
    #[error("{context}: {source}")]
    Model {
        context: String,
        #[source]
        source: cankd_core::Error,
    },
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: &'static str, epoch: usize, step: usize },
    #[error("teacher checkpoint {0} not found and pretraining is disabled")]
    CheckpointMissing(PathBuf),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing metrics to {path}: {message}")]
    Metrics { path: PathBuf, message: String },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigInvalid(_) | HarnessError::ConfigParse { .. } | HarnessError::Model { .. } => {
                exit_code::CONFIG
            }
            HarnessError::NonFinite { .. } => exit_code::NUMERICAL,
            HarnessError::CheckpointMissing(_)
            | HarnessError::Checkpoint { .. }
            | HarnessError::Io { .. }
            | HarnessError::Metrics { .. } => exit_code::IO,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub(crate) fn model(context: impl Into<String>) -> impl FnOnce(cankd_core::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Model { context, source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
