use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum AtmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("equivalence check failed: residual {residual:e} exceeds tolerance {tolerance:e}")]
    CheckFailed { residual: f64, tolerance: f64 },

    #[error("encoding failed: {0}")]
    Encode(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AtmError {
    pub fn config(msg: impl Into<String>) -> Self {
        AtmError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AtmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration rather than by a
    /// failure while running an experiment.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            AtmError::Config(_) | AtmError::Json(_) | AtmError::ArchMismatch(_)
        ) || matches!(self, AtmError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T, E = AtmError> = std::result::Result<T, E>;
