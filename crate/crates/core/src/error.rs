use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{what} index {index} out of range (limit {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },
    #[error("integrity error in document {doc}: {msg}")]
    Integrity { doc: String, msg: String },
    #[error("non-finite value in loss component `{component}`")]
    NonFinite { component: String },
    #[error("search space of {count} subsets exceeds the budget of {limit}")]
    Budget { count: u128, limit: u128 },
    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            msg: msg.into(),
        }
    }
}
