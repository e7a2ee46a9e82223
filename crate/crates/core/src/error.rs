use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: String, index: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
