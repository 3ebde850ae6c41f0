use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot draw {k} items: only {available} have nonzero probability")]
    InsufficientSupport { k: usize, available: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("load error in {path}: {reason}")]
    Load { path: String, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stale selection outcome: produced under params version {outcome}, current version {current}")]
    StaleOutcome { outcome: u64, current: u64 },

    #[error("non-finite gradient at update {step} (batch tasks {task_ids:?})")]
    NumericalAbort {
        step: u64,
        task_ids: Vec<u64>,
        params: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn load(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
