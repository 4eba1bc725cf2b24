use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for vocabulary of size {size}")]
    Vocabulary { index: usize, size: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus alignment error in {path}: {detail}")]
    CorpusAlignment { path: PathBuf, detail: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("ensemble error: {0}")]
    Ensemble(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("word boundary reconstruction failed: {0}")]
    WordBoundary(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
