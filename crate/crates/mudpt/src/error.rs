//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by public operations.
#[derive(Debug)]
pub enum Error {
    /// Tensor or sequence shapes are inconsistent with the operation's contract.
    Shape { context: String, expected: String, actual: String },
    /// An argument violates a precondition (empty input, bad range, ...).
    InvalidInput(String),
    /// A token id falls outside the vocabulary, or a required token is missing.
    Vocabulary(String),
    /// A configuration is internally contradictory or unsupported.
    Config(String),
    /// A numeric operation produced or encountered a non-finite or undefined value.
    Numeric(String),
    /// A dataset or split cannot satisfy the request.
    Data(String),
    /// An invariant that the implementation itself must uphold was violated.
    Internal(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl fmt::Display, actual: impl fmt::Display) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, expected, actual } => {
                write!(f, "shape error in {context}: expected {expected}, got {actual}")
            }
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Vocabulary(msg) => write!(f, "vocabulary error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
