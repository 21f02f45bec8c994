use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum CmcError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor {index} is not on record {record}")]
    UnknownTensor { record: u64, index: usize },

    #[error("record {0} was created with recording off; no adjoints are available")]
    NotRecording(u64),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },

    #[error("invalid patch plan: {0}")]
    Patch(String),

    #[error("unknown component or edge: {0}")]
    Unknown(String),

    #[error("invalid candidate sets: {0}")]
    Candidates(String),

    #[error("invalid template: {0}")]
    Template(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined result: {0}")]
    Degenerate(String),

    #[error("planted circuit: {0}")]
    Planting(String),

    #[error("intervention: {0}")]
    Intervention(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CmcError>;
