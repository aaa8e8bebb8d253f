use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {id} out of range for table with {len} rows")]
    Index { id: usize, len: usize },

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("attention row {row} has every key masked out")]
    DegenerateAttention { row: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("assembled sequence of {len} tokens exceeds the maximum of {max}")]
    Truncation { len: usize, max: usize },

    #[error("loss became non-finite at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    Divergence { step: u64, lr: f64, grad_norm: f64 },

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
