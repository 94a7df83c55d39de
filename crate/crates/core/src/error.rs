//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Internal state does not permit the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A checkpoint file is malformed or does not match the current model.
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    /// Configuration could not be resolved or validated.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted (e.g. non-finite loss); carries a diagnostic dump.
    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }
}
