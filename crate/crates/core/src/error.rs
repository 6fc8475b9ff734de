use carpe_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CarpeError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("tokenization failed: word {0:?} is not in the vocabulary")]
    Tokenize(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds the configured maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CarpeError>;
