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

    #[error("cross entropy has no non-ignored positions; mean is undefined")]
    UndefinedMean,

    #[error("probability row {row} sums to {sum}, expected 1")]
    Normalization { row: usize, sum: f64 },

    #[error("non-finite loss while perturbing parameter `{param}` (entry {index})")]
    NumericalInstability { param: String, index: usize },

    #[error("non-finite {component} at step {step}")]
    NonFinite { step: usize, component: String },

    #[error("sequence of length {needed} exceeds the context window of {limit}")]
    ContextOverflow { needed: usize, limit: usize },

    #[error("splice coverage error: {0}")]
    Coverage(String),

    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("no metric samples: {0}")]
    EmptyMetricInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
