//! Error type shared across the crate.

use thiserror::Error;

/// Broad failure class, used by callers (the CLI in particular) to map
/// errors onto exit codes without matching on every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or inconsistent input data (manifests, images, geometry).
    Data,
    /// Numerical failure or violated numeric precondition.
    Numeric,
    /// Filesystem or serialized-format failure.
    Io,
}

#[derive(Debug, Error)]
pub enum LrfError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl LrfError {
    pub fn class(&self) -> ErrorClass {
        match self {
            LrfError::InvalidGeometry(_) | LrfError::DimensionMismatch(_) | LrfError::Data(_) => {
                ErrorClass::Data
            }
            LrfError::Numeric(_) => ErrorClass::Numeric,
            LrfError::Format(_) | LrfError::Io(_) => ErrorClass::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, LrfError>;
