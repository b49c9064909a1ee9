use crate::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or mismatched file content. `offset` is the byte position
    /// where decoding stopped.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// The synthetic model's planted glitch set disagrees with the oracle.
    #[error("model verification failed: {detail} (tokens {tokens:?})")]
    Verification { tokens: Vec<TokenId>, detail: String },

    /// Data too degenerate to fit a classifier (e.g. a single-class sample).
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: msg.into(),
    }
}
