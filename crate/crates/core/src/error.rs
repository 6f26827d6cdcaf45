use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GplvmError>;

#[derive(Debug, Error)]
pub enum GplvmError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix {matrix} is ill-conditioned: Cholesky failed even with jitter {jitter:e}")]
    IllConditioned { matrix: String, jitter: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("genes not found: {}", .0.join(", "))]
    MissingGenes(Vec<String>),

    #[error("column '{column}': level(s) not seen during fitting: {}", .levels.join(", "))]
    UnseenLevel { column: String, levels: Vec<String> },

    #[error("column '{0}' has zero variance and cannot be standardized")]
    ZeroVariance(String),

    #[error("model is not in block form: {0}")]
    NotBlockForm(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("non-finite gradient in parameter block '{0}'")]
    NonFiniteGradient(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GplvmError {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        GplvmError::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GplvmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than a numerical or internal failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            GplvmError::NonFinite(_)
                | GplvmError::IllConditioned { .. }
                | GplvmError::NonFiniteGradient(_)
        )
    }
}
