use thiserror::Error;

use crate::metrics::StepMetrics;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: dimension mismatch, {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// The gradient graph was used out of order (e.g. a second backward pass).
    #[error("graph state error: {0}")]
    State(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// MRD needs tokens from both modalities in the batch.
    #[error("modality routing distribution undefined: batch has {n_vision} vision and {n_text} text tokens")]
    MrdUndefined { n_vision: usize, n_text: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    Schema { expected: u32, found: u32 },

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss. Carries the last logged metrics.
    #[error("non-finite loss at step {step}")]
    NonFinite {
        step: usize,
        last_metrics: Option<Box<StepMetrics>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }
}
