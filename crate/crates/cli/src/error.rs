use std::fmt;
use std::path::PathBuf;

use projtune::{Error, FormatError};

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    Io { path: PathBuf, source: std::io::Error },
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                Error::Diverged { .. } => 3,
                Error::Format(_) => 4,
                Error::InvalidInput(_)
                | Error::Shape(_)
                | Error::InvalidUse(_)
                | Error::Unsupported(_)
                | Error::InsufficientClass { .. }
                | Error::Generation { .. } => 2,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(Error::Diverged { epoch, last_finite }) => write!(
                f,
                "training diverged at epoch {epoch}; last finite parameters have max |entry| {:.3e}",
                last_finite.max_abs()
            ),
            CliError::Core(Error::Format(e @ FormatError::Io { .. })) => write!(f, "{e}"),
            CliError::Core(Error::Format(e)) => write!(f, "format error (code {}): {e}", e.code()),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::CheckFailed(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
