use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ClipsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClipsError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Data { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {detail}")]
    NonFinite { step: usize, batch_seed: u64, detail: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ClipsError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Invalid(_) | Self::Data { .. })
    }
}
