//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("correlation undefined: input vector is constant")]
    ConstantVector,

    #[error("context window overflow: {0}")]
    ContextOverflow(String),

    #[error("parse error at {line}:{col}: {message}")]
    Parse {
        line: usize,
        col: usize,
        message: String,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("response rejected: {0}")]
    BadResponse(String),

    #[error("sandbox infrastructure error: {0}")]
    Sandbox(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; batch dump written to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
