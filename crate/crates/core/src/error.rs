use thiserror::Error;

pub type Result<T> = std::result::Result<T, GphmeError>;

#[derive(Debug, Error)]
pub enum GphmeError {
    /// Malformed or inconsistent arguments.
    #[error("invalid input: {0}")]
    Input(String),

    /// The operation is not defined for this configuration.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A loss term or gradient went non-finite.
    #[error("training diverged: {term} = {value}")]
    Training { term: String, value: f64 },

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GphmeError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        GphmeError::Input(msg.into())
    }

    pub(crate) fn unsupported(msg: impl Into<String>) -> Self {
        GphmeError::Unsupported(msg.into())
    }
}
