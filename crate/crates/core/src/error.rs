use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vocabulary budget exceeded: world needs {needed} tokens but vocab_size is {available}")]
    Capacity { needed: usize, available: usize },

    #[error("unknown concept id {0}")]
    UnknownConcept(usize),

    #[error("alias pool exhausted for concept {0}")]
    AliasPoolExhausted(usize),

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("image feature has dimension {got}, model expects {expected}")]
    ImageDimension { got: usize, expected: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("mask construction failed: {0}")]
    Mask(String),

    #[error("non-finite loss for batch example {index}")]
    NonFiniteLoss { index: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("pre-training gate not met: recognition accuracy {accuracy:.1}% is below {threshold}%")]
    GateFailed { accuracy: f64, threshold: f64 },

    #[error("concept {concept} has {facts} facts, at least {required} required")]
    InsufficientFacts { concept: usize, facts: usize, required: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
