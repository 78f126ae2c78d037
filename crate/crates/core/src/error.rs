//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type. Variants map onto the CLI exit-code contract:
/// usage/config -> 2, data/format -> 3, numeric -> 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on axis {axis}: {msg}")]
    Dimension { axis: usize, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(axis: usize, msg: impl Into<String>) -> Self {
        Error::Dimension { axis, msg: msg.into() }
    }
}
