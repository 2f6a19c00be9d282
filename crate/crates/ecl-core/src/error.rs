//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by dataset construction, training, and evaluation.
#[derive(Debug, Error)]
pub enum EclError {
    /// Configuration file or experiment settings are invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An operation received arguments violating its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An embedding with zero norm cannot be normalized.
    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,

    /// Dataset or checkpoint files are missing, malformed, or incompatible.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EclError {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            EclError::Config(_) | EclError::InvalidInput(_) => 2,
            EclError::Data(_) | EclError::Io(_) => 3,
            EclError::Numerical(_) | EclError::DegenerateEmbedding => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, EclError>;
