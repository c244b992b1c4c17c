use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config {path}:{line}: {key}: {msg}")]
    ConfigKey {
        path: String,
        line: usize,
        key: String,
        msg: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("mask sampler exhausted after {retries} retries: {reason}")]
    SamplerExhausted { retries: usize, reason: String },

    #[error("non-finite activation in layer {layer} ({site})")]
    NumericalFailure { layer: usize, site: &'static str },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(&'static str),

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by NaN/Inf values rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFailure { .. } | Error::NonFiniteGradient(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
