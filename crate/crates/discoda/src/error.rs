//! Crate-wide error type and the process exit-code policy.

use std::path::PathBuf;
use thiserror::Error;

/// Errors raised by data handling, training, checkpoints, and the CLI.
#[derive(Error, Debug)]
pub enum Error {
    #[error("data error: {0}")]
    Data(String),

    #[error("data error in {path}:{line}: {reason}")]
    DataAt {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("numeric error: {0}")]
    Numeric(#[from] discoda_ad::AdError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::DataAt { .. } | Error::Io(_) | Error::Json(_) => 2,
            Error::Checkpoint(_) => 2,
            Error::Numeric(_) => 3,
            Error::Train(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
