use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FairError>;

#[derive(Debug, Error)]
pub enum FairError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("dense materialization of {rows}x{cols} exceeds cap of {cap} entries")]
    TooLarge {
        rows: usize,
        cols: usize,
        cap: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("user {user} has {available} interactions, needs more than {required}")]
    TooFewInteractions {
        user: usize,
        available: usize,
        required: usize,
    },

    #[error("user {user} has no eligible negative items")]
    NoNegatives { user: usize },

    #[error("non-finite parameters after round {round} on device {device}")]
    Diverged { round: usize, device: usize },

    #[error("no evaluable users")]
    NoEvaluableUsers,
}

impl FairError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FairError::InvalidArgument(msg.into())
    }
}
