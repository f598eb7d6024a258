use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// A failed command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input files; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while doing the work; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error on {}: {e}", path.display()))
    }
}

impl From<epsilon_core::Error> for CliError {
    fn from(e: epsilon_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}
