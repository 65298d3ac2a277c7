//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with incompatible array extents.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value that must stay finite became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file could not be decoded; `offset` is the byte where parsing stopped.
    #[error("parse error in {file} at byte {offset}: {msg}")]
    Parse {
        file: PathBuf,
        offset: usize,
        msg: String,
    },

    /// A condition cache no longer matches the condition tokens it was built from.
    #[error("stale condition cache: {0}")]
    CacheInvalid(String),

    /// Runtime configuration disagrees with a stored artifact.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
