//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch; names the op and the offending axis.
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    /// Batch norm in train mode needs at least two elements per channel.
    #[error("degenerate batch in {op}: {n} element(s) per channel, need >= 2")]
    DegenerateBatch { op: &'static str, n: usize },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Unknown class name in a text query.
    #[error("unknown class name {term:?}; valid names: {}", valid.join(", "))]
    Vocabulary { term: String, valid: Vec<String> },

    /// Two indices cannot be searched against each other.
    #[error("incompatible indices: {0}")]
    IncompatibleIndex(String),

    /// A forward op produced NaN/Inf; names the first offending op.
    #[error("non-finite value produced by op {op}")]
    NonFinite { op: &'static str },

    /// Malformed checkpoint, index, or manifest file.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code contract: 1 for usage/contract errors, 2 for i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Format { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
