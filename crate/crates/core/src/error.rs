use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed SMILES {smiles:?} at byte {position}: {reason}")]
    MalformedSmiles {
        smiles: String,
        position: usize,
        reason: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("no valid labels in batch")]
    EmptyMask,

    #[error("degenerate task {task}: all valid labels belong to one class")]
    DegenerateTask { task: usize },

    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    Numerical {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
