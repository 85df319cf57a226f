use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid probability {0}: must lie in [0, 1)")]
    InvalidProbability(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("regime/argument mismatch: {0}")]
    Regime(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("tape mismatch: {0}")]
    Tape(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("unparseable label {0:?}")]
    Label(String),

    #[error("sentence {sentence}: gold has {gold} tokens, prediction has {predicted}")]
    Alignment {
        sentence: usize,
        gold: usize,
        predicted: usize,
    },

    #[error("non-finite loss at epoch {epoch}, sequence {sequence}")]
    NonFinite { epoch: usize, sequence: usize },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, left: impl ToString, right: impl ToString) -> Error {
    Error::Shape {
        op,
        left: left.to_string(),
        right: right.to_string(),
    }
}
