use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("unknown class label {0}")]
    UnknownLabel(u32),

    #[error("already initialized: {0}")]
    AlreadyInitialized(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("labeler failed on sample {index}: {reason}")]
    Labeler { index: usize, reason: String },

    #[error("attack diverged at iteration {iteration} (loss {loss:e})")]
    Diverged {
        iteration: usize,
        loss: f64,
        trajectory: Vec<f64>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
