use thiserror::Error;

/// Errors raised by the estimation, prediction and I/O routines.
#[derive(Debug, Error)]
pub enum GppcaError {
    /// Malformed or inconsistent input (shapes, ranges, configuration).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A factorization or optimization failed numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A data file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GppcaError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        GppcaError::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        GppcaError::Numeric(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            GppcaError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, GppcaError>;
