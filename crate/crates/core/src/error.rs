use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("{path}: utterance is {seconds:.2} s, longer than the {limit:.0} s cap")]
    TooLong {
        path: PathBuf,
        seconds: f64,
        limit: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config digest mismatch: checkpoint has {stored}, expected {expected}")]
    DigestMismatch { stored: String, expected: String },

    #[error("sequence overflow: {audio} audio positions + {text} text positions exceed {max}")]
    SequenceOverflow { audio: usize, text: usize, max: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
