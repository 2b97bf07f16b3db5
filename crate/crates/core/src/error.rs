use thiserror::Error;

/// Errors raised by the numeric core, the model and the task codecs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph is not in topological order at node {0}")]
    GraphCycle(usize),
    #[error("non-deterministic objective: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("out-of-vocabulary token {token:?} at {position}")]
    OutOfVocabulary { token: String, position: String },
    #[error("edit operations do not match input: {0}")]
    EditMismatch(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint payload: {0}")]
    CorruptCheckpoint(String),
    #[error("dataset format: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
