use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum LsaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient OOD pool: required {required} images, available {available}")]
    InsufficientPool { required: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("score ids are not aligned: {0}")]
    IdMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("refusing to overwrite completed run at {0} (pass --force)")]
    AlreadyExists(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LsaError {
    /// Whether the caller (config, flags, input files) is at fault rather
    /// than the computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            LsaError::InvalidInput(_)
                | LsaError::InsufficientPool { .. }
                | LsaError::Config(_)
                | LsaError::Format(_)
                | LsaError::MissingInput(_)
                | LsaError::AlreadyExists(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, LsaError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LsaError::InvalidInput(msg.into()))
}
