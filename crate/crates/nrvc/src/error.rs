//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("unsupported audio format on {path}: {message} (expected mono 16-bit PCM)")]
    UnsupportedFormat { path: PathBuf, message: String },

    #[error("{0}")]
    Audio(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error on {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("probe error: {0}")]
    Probe(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
