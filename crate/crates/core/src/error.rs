use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite activation at layer {layer} ({kind})")]
    NonFiniteActivation { layer: usize, kind: &'static str },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: task loss {loss}, metadata loss {lstar}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        lstar: f64,
    },

    #[error("gram matrix is numerically singular (condition estimate {condition:e})")]
    SingularGram { condition: f64 },

    #[error("MDN layer evaluated before any training batch was seen")]
    NeverTrained,

    #[error("tape does not match the network: {0}")]
    TapeMismatch(String),

    #[error("optimizer state does not match parameters: {0}")]
    StateShapeMismatch(String),

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("input is constant")]
    ConstantInput,

    #[error("binary input contains a single class")]
    SingleClass,

    #[error("invalid metadata matrix: {0}")]
    InvalidMetadata(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
