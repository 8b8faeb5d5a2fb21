use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("backbone is frozen; parameter write rejected")]
    Frozen,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unsupported strategy for this operation: {0}")]
    UnsupportedStrategy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("refusing to overwrite existing output {} (use --force)", .0.display())]
    Exists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
