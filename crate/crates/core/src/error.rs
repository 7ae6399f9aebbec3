use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task split: {0}")]
    InvalidSplit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {msg}")]
    Ingest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate prototype: {0}")]
    DegeneratePrototype(String),

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("zero variance operand in correlation")]
    ZeroVariance,

    #[error("every attention token is masked")]
    Mask,

    #[error("batch of {0} is too small for the mutual-information estimate (need at least 2)")]
    BatchTooSmall(usize),

    #[error("metrics ledger has no completed stages")]
    EmptyLedger,

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("checkpoint error in {tensor}: {msg}")]
    Checkpoint { tensor: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
