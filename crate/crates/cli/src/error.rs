use gplvm::GplvmError;
use thiserror::Error;

/// Failure of a command, split by who has to act on it.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input, configuration or invocation. Exit code 1.
    #[error("{0}")]
    User(String),
    /// Numerical breakdown, failed self-check or a bug. Exit code 2.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<GplvmError> for CliError {
    fn from(e: GplvmError) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}
