use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    UnknownTokenId { id: u32, size: usize },

    #[error("sequence of length {len} exceeds context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("incomplete task stream: missing {0}")]
    StreamIncomplete(PathBuf),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
