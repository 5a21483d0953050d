use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("value {value} does not fit in {bits} bits")]
    Range { value: u64, bits: u8 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("alphabet of {size} symbols exceeds the coder limit of {limit}")]
    Alphabet { size: usize, limit: usize },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("checkpoint hash mismatch: stream was written with a different model")]
    HashMismatch,

    #[error("training error: {0}")]
    Training(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
