//! Crate-wide error type.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor construction, file I/O, and the training stack.
#[derive(Debug)]
pub enum Error {
    /// A caller-supplied argument violated a documented precondition.
    InvalidArgument {
        arg: &'static str,
        reason: String,
    },
    /// Two tensors (or a tensor and an expected geometry) disagree in shape.
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A NaN or infinity appeared where only finite values are allowed.
    NonFinite {
        context: String,
    },
    /// A gradient tape was asked to run backward a second time.
    TapeConsumed,
    /// An underlying read or write failed.
    Io {
        context: String,
        source: std::io::Error,
    },
    /// A file or stream did not match the expected on-disk layout.
    Format {
        context: String,
    },
}

impl Error {
    pub fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn format(context: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument { arg, reason } => {
                write!(f, "invalid argument `{arg}`: {reason}")
            }
            Error::ShapeMismatch {
                context,
                expected,
                found,
            } => write!(
                f,
                "shape mismatch in {context}: expected {expected:?}, found {found:?}"
            ),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::TapeConsumed => write!(f, "gradient tape already consumed by backward"),
            Error::Io { context, source } => write!(f, "I/O failure ({context}): {source}"),
            Error::Format { context } => write!(f, "malformed data: {context}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
