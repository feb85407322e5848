//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: String, detail: String },

    #[error("{op}: index {index} out of range (len {len})")]
    Index { op: String, index: usize, len: usize },

    #[error("{op}: non-finite value produced (NaN/Inf); aborting step")]
    NonFinite { op: String },

    #[error("{op}: row {row} has no eligible positions")]
    EmptyMask { op: String, row: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no selected context: {0}")]
    EmptySelection(String),

    #[error("{path}:{line}: malformed record: {detail}")]
    Malformed { path: String, line: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
