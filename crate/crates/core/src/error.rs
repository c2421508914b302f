use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the framework.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose extents break its contract.
    #[error("shape contract violated in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A block or run was configured with values that can never work.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API was used out of order (for example a tape replayed twice).
    #[error("usage error: {0}")]
    Usage(String),

    /// A gradient or activation turned non-finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
