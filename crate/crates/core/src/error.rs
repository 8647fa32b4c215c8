use std::path::PathBuf;

use iid_tensor::TensorError;

/// Errors raised across the decomposition toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A file exists but its contents are malformed.
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    /// A caller-supplied value violates an operation's precondition.
    #[error("{0}")]
    Invalid(String),
    /// A least-squares fit had no well-defined solution.
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or preconditions.
    Usage,
    /// Unreadable or malformed input files.
    Input,
    /// Numerical failure (non-finite values, degenerate fits).
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::Image(_) => {
                ErrorClass::Input
            }
            Error::Invalid(_) => ErrorClass::Usage,
            Error::Degenerate(_) | Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Tensor(e) => match e {
                TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. } => {
                    ErrorClass::Numeric
                }
                _ => ErrorClass::Usage,
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
