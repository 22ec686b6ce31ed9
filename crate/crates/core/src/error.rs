use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for {what} (size {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("every position is masked out; the loss is undefined")]
    DegenerateLoss,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("invalid configuration: {}", format_config_errors(.0))]
    Config(Vec<ConfigError>),

    #[error("slot layout: {0}")]
    Layout(String),

    #[error("sequence of length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("training failed: {reason}")]
    TrainingFailure { reason: String, losses: Vec<f64> },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("comparison refused: {0}")]
    Comparison(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_config_errors(errs: &[ConfigError]) -> String {
    errs.iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
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
