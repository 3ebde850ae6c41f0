use std::path::PathBuf;

use selab_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path} already exists (use --force to overwrite)")]
    Exists { path: PathBuf },

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 config, 3 data, 4 numerical abort. A policy whose probabilities
    /// underflow to fewer than K live items counts as numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::NumericalAbort { .. }
                | CoreError::NonFinite(_)
                | CoreError::InsufficientSupport { .. } => 4,
                _ => 3,
            },
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
