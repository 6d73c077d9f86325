use thiserror::Error;

/// Errors raised anywhere in the pipeline library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
