//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {context}: left shape {left:?} vs right shape {right:?}")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("unknown enumeration value: {0}")]
    Enumeration(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("parameter has no gradient: {0}")]
    UnreadyParameter(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("training aborted: {0}")]
    TrainingAbort(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
