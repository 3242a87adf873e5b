use thiserror::Error;

/// Errors produced anywhere in the continual-learning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parameter `{0}` is frozen")]
    FrozenParameter(String),

    #[error("parameter `{0}` is not tracked")]
    UntrackedParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },

    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("model is frozen")]
    FrozenModel,

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("expected {expected} {what}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("task {0} is already registered")]
    DuplicateTask(u32),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("fusion weight {0} outside [0, 1]")]
    InvalidAlpha(f32),

    #[error("LoRA: {0}")]
    Lora(String),

    #[error("not enough records for `{tag}`: {count} < {required}")]
    NotEnoughRecords {
        tag: String,
        count: usize,
        required: usize,
    },

    #[error("record store is at its cap of {0}")]
    StoreFull(usize),

    #[error("source `{source_name}`: {message}")]
    Source {
        source_name: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
