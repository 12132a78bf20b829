use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky factorization hit a non-positive pivot at `minor` (0-based).
    #[error("numeric failure: matrix is not positive definite (leading minor {minor})")]
    NumericFailure { minor: usize },

    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Schema violation in a JSON document; `path` names the offending key.
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
