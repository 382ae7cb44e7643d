use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file header or unknown magic.
    #[error("format error: {0}")]
    Format(String),
    /// File shorter than its header promises, or payload inconsistent.
    #[error("corrupt data: {0}")]
    Corrupt(String),
    /// Array dimensions incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    /// A loss turned NaN/Inf during training.
    #[error("numeric failure: {term} is not finite at iteration {iteration}")]
    Numeric { term: String, iteration: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
