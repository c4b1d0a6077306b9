use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("tensor file format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("augmentation error: {0}")]
    Augment(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: loss term `{term}` is not finite")]
    Divergence { term: String, epoch: usize },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has `{found}`, expected `{expected}`")]
    Version { found: String, expected: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
