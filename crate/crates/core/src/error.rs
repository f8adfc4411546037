use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// Variants are grouped by what the caller can do about them; the CLI maps
/// [`Error::Config`] to exit code 2 and [`Error::Io`] to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation failed for tensor `{name}`: {reason}")]
    Validation { name: String, reason: String },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
