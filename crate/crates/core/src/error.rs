use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}: mask selects no positions")]
    EmptyMask(&'static str),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("optimizer step called before any backward pass")]
    NoGradients,

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("insertion plan has {plan} entries but the host has {layers} layers")]
    PlanMismatch { plan: usize, layers: usize },

    #[error("model has no passthrough layers")]
    NoPassthroughLayers,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {0}")]
    UnknownVersion(u32),

    #[error("sample is empty")]
    EmptySample,

    #[error("key-poisoned sample has no key span")]
    MissingKeySpan,

    #[error("trigger set is empty")]
    EmptyTriggerSet,

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("sampler failed after {steps} steps (partial mean {partial_mean:.4} nats): {reason}")]
    SamplerFailure {
        steps: usize,
        partial_mean: f64,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
