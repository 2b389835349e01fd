use std::path::PathBuf;

use crate::numerics::Mat;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid use: {0}")]
    InvalidUse(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    /// Training produced a non-finite loss. `last_finite` is the parameter
    /// matrix as it stood before the failing epoch.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_finite: Box<Mat> },

    #[error("every class needs at least {needed} samples, class {class} has {available}")]
    InsufficientClass {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("synthetic generation failed after {attempts} draws: {hint}")]
    Generation { attempts: usize, hint: String },

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Errors raised while decoding the binary containers.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: Vec<u8> },

    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    /// Stable numeric code for each failure class.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::Truncated { .. } => 2,
            FormatError::SizeMismatch { .. } => 3,
            FormatError::InvalidHeader(_) => 4,
            FormatError::Io { .. } => 5,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
