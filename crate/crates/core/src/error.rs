use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("non-finite {stage} loss at step {step}")]
    NonFiniteLoss { stage: &'static str, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range 1..={len}")]
    Index { index: usize, len: usize },

    #[error("failed to load `{entry}`: {reason}")]
    Load { entry: String, reason: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("class {class} has {available} samples, need at least {required}")]
    Sampling {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("corrupt checkpoint {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dim { op, lhs, rhs }
    }

    pub(crate) fn load(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            entry: entry.into(),
            reason: reason.into(),
        }
    }
}
