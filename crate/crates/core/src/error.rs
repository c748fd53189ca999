use std::io;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid check: {0}")]
    InvalidCheck(String),
    #[error("statistical validity error: {0}")]
    Statistical(String),
    #[error("archive parse error at entry {entry}: {msg}")]
    Parse { entry: String, msg: String },
    #[error("archive version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
