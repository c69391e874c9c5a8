//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument had the wrong dimension.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An argument violated a precondition.
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    /// An operation was called in a state that cannot support it.
    #[error("invalid state: {0}")]
    State(String),

    /// A numeric computation left the representable range.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A binary container failed to parse.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Training diverged or failed a quality gate.
    #[error("training failure: {0}")]
    Training(String),

    /// A metrics or config line failed to parse.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
