use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("training aborted at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
