use thiserror::Error;
use twinspec_nn::NnError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("length error: {0}")]
    Length(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Whether the error stems from a non-finite value anywhere in the stack.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Nn(NnError::Numeric(_)))
    }
}
