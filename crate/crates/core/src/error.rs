use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("loss has no masked-in positions")]
    EmptyLoss,

    #[error("tracing error: {0}")]
    Tracing(String),

    #[error("token id {id} out of vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("window of {len} tokens exceeds maximum context of {max}")]
    ContextSize { len: usize, max: usize },

    #[error("window has no positions to pool")]
    EmptyWindow,

    #[error("overlap {overlap} is invalid for window length {window} (need overlap < window)")]
    InvalidOverlap { overlap: usize, window: usize },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("token/text alignment error at byte {offset}: {detail}")]
    Alignment { offset: usize, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("format error in {path:?} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
