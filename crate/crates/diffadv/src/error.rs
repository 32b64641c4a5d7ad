//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Array shapes do not match the interface contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A model lacks a capability the requested operation needs.
    #[error("capability missing: {0}")]
    Capability(String),

    /// Registry lookup or registration failed.
    #[error("registry error: {0}")]
    Registry(String),

    /// A persisted artifact is malformed or has an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced an undefined result (e.g. empty evaluation set).
    #[error("undefined result: {0}")]
    Undefined(String),

    /// Model fitting did not meet its recorded quality bars.
    #[error("fit error: {0}")]
    Fit(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
