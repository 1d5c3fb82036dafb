use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, extents or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity reached a place where it must not.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation invoked on an object whose internal state does not allow it.
    #[error("state error: {0}")]
    State(String),

    /// Caller passed arguments that violate an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("invalid phantom parameters: {0}")]
    Phantom(String),

    #[error("ingestion error in {file}: {message}")]
    Ingest { file: String, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Protocol(#[from] crate::service::ProtocolError),

    #[error("training diverged at step {step} (lr {lr}): kl {kl}, dice {dice}")]
    Diverged { step: usize, lr: f64, kl: f64, dice: f64 },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Failures while reading a model checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("checkpoint has {0} trailing bytes after the tensor payload")]
    TrailingBytes(usize),
    #[error("checkpoint header is inconsistent with its architecture: {0}")]
    Inconsistent(String),
    #[error("checkpoint header is not valid JSON: {0}")]
    Header(serde_json::Error),
}
