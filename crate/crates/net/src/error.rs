use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lwe_core::Error),

    /// A graph is malformed or was fed tensors of the wrong shape.
    #[error("graph error: {0}")]
    Graph(String),

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
