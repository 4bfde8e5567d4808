use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeroError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HeroError>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::HeroError::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
