//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor/argument shapes. The message names both shapes.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Structurally valid shapes but invalid values (non-finite input,
    /// negative density, non-ascending depths, ...).
    #[error("{op}: {msg}")]
    InvalidValue { op: &'static str, msg: String },

    /// backward() called on a tensor that is neither produced by a recorded
    /// operation nor a gradient leaf.
    #[error("backward: loss tensor is detached from the graph")]
    DetachedLoss,

    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(String),

    /// Non-finite loss or gradient during optimization. Carries the iteration
    /// at which training aborted.
    #[error("numeric abort at iteration {iter}: {msg}")]
    Numeric { iter: u64, msg: String },

    /// A verification suite (gradient check, ...) failed.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidValue { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
