use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config at `{path}`: {msg}")]
    InvalidConfig { path: String, msg: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure in {0}")]
    NumericFailure(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint version: found {found}, expected {expected}")]
    Version { found: String, expected: String },

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by user-supplied configuration or input, as
    /// opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InvalidConfig { .. }
                | Error::Parse { .. }
                | Error::Precondition(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
