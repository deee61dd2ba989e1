//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a precondition (shape, range, emptiness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two streams or tensors disagree on a dimension that must match.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A file had the wrong magic, version, or declared layout.
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    /// A pipeline stage was run before its inputs exist.
    #[error("missing artifact for stage '{stage}': {path}")]
    MissingArtifact { stage: String, path: String },

    /// A numerical routine could not produce a usable answer.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
