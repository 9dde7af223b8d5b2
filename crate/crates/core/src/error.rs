use thiserror::Error;

/// Errors produced by the estimators and their building blocks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty input")]
    EmptyInput,
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    /// A high-probability step (trace bucketing, subspace search) did not succeed.
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error("insufficient samples: need {required} ({blocks} blocks of {block_size}), got {available}")]
    InsufficientSamples { required: usize, available: usize, block_size: usize, blocks: usize },
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("division by zero: {0}")]
    DivisionByZero(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_param(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
