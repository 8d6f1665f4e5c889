use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: slot `{0}` not present in sentence")]
    MissingSlot(String),
    #[error("span ({start}, {end}) cannot be mapped to context tokens")]
    UnmappableSpan { start: usize, end: usize },
    #[error("input of {len} tokens exceeds max_positions {max}")]
    Length { len: usize, max: usize },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for problems the user can fix (bad flags, bad files, bad configs).
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Consistency(_) | Error::Divergence(_) | Error::Degenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
