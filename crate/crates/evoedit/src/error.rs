use thiserror::Error;

use crate::synthworld::EditTask;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("no caption rule matches instruction {0:?}")]
    UnknownCategory(String),

    #[error("could not extract caption slots for {task}: {reason}")]
    SlotExtraction { task: EditTask, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schedule derivative {derivative:e} at t={t} is too small to invert")]
    SingularSchedule { t: f64, derivative: f64 },

    #[error("tap index {index} out of range for depth {depth}")]
    TapOutOfRange { index: usize, depth: usize },

    #[error("cache integrity: {0}")]
    CacheIntegrity(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
