//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (presets, layouts, model settings, CLI input).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape disagreement in an nn-core operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An input left no valid pixels to reduce over.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Loss became non-finite during training.
    #[error("training diverged at iteration {0}: non-finite loss")]
    Diverged(usize),

    /// Checkpoint manifest does not match the model's parameter shapes.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Malformed file content (PFM, JSON, checkpoint blob).
    #[error("malformed {format}: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
