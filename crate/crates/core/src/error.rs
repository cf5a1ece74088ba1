use thiserror::Error;

/// Errors raised by model construction, numerics and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("validation error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Validation { row: Option<usize>, message: String },

    #[error("numerical failure in block `{block}`{}: {message}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numerical {
        block: String,
        iteration: Option<usize>,
        message: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn numerical(block: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            block: block.into(),
            iteration: None,
            message: message.into(),
        }
    }

    pub fn validation(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Validation {
            row,
            message: message.into(),
        }
    }

    /// Attach an iteration index to a numerical failure.
    pub fn at_iteration(self, iter: usize) -> Self {
        match self {
            Error::Numerical { block, message, .. } => Error::Numerical {
                block,
                iteration: Some(iter),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
