use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GavgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at index {index} ({context})")]
    Numeric { index: usize, context: String },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GavgError {
    pub fn domain(msg: impl Into<String>) -> Self {
        GavgError::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        GavgError::Config(msg.into())
    }

    pub fn numeric(index: usize, context: impl Into<String>) -> Self {
        GavgError::Numeric {
            index,
            context: context.into(),
        }
    }

    /// Process exit status used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            GavgError::Config(_) | GavgError::Json(_) => 2,
            GavgError::Divergence(_) | GavgError::Numeric { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GavgError>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GavgError::Dimension { expected, got })
    }
}
