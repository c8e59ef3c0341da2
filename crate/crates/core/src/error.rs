use thiserror::Error;

/// Error type shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value after {op} at flat index {index} (shape {shape:?}): {value}")]
    NonFinite {
        op: String,
        index: usize,
        shape: Vec<usize>,
        value: f32,
    },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("loss function is not deterministic: baseline evaluations {first} and {second} differ")]
    NonDeterministic { first: f32, second: f32 },

    #[error("training state error: {0}")]
    TrainingState(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("report empty after preprocessing")]
    EmptyReport,

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("sequence length {needed} exceeds max_seq {max_seq}{context}")]
    Length {
        needed: usize,
        max_seq: usize,
        context: String,
    },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("degenerate basis: could not generate non-collinear vectors after {0} retries")]
    DegenerateBasis(usize),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
