use thiserror::Error;

use crate::harness::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} takes a different number of inputs (got {got})")]
    Arity { op: &'static str, got: usize },

    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),

    #[error("non-finite value produced by {context}")]
    NonFinite { context: &'static str },

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("models lack shared initialization (expected {expected}, member {member} has {found})")]
    SharedInitMismatch {
        expected: String,
        member: usize,
        found: String,
    },

    #[error("non-finite loss or gradient at optimizer step {step}")]
    NonFiniteStep { step: u64 },

    #[error("invalid domain for {family}: {reason}")]
    InvalidDomain { family: &'static str, reason: String },

    #[error("class {class} has {available} samples, {needed} requested")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("threshold unreachable: accuracy {reached:.4} < {target} after {epochs} epochs")]
    ThresholdUnreachable {
        target: f64,
        reached: f64,
        epochs: usize,
    },

    #[error("run {run_id} failed: {source}")]
    RunFailed {
        run_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::InvalidDomain { .. }
                | Error::SpecMismatch(_)
        )
    }
}
