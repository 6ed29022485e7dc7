use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("degenerate attention: row {row} has every entry masked out")]
    DegenerateAttention { row: usize },

    #[error("invalid segmentation: source length {source_len} must lie in [2, {max}] for a sequence of length {len}")]
    InvalidSegmentation {
        source_len: usize,
        len: usize,
        max: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("nothing to predict: {0}")]
    EmptyTargets(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("sequence of {len} tokens exceeds the model's {max_len} positions; truncate the source")]
    TooLong { len: usize, max_len: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint tensor {name} has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
