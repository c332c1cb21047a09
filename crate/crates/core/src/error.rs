use std::path::PathBuf;

use thiserror::Error;

use crate::adapter::PositionId;

pub type Result<T> = std::result::Result<T, PearError>;

#[derive(Debug, Error)]
pub enum PearError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("position {0} is shared from a slot that is not owned")]
    DanglingShare(PositionId),

    #[error("position {0} does not exist in the bank")]
    UnknownPosition(PositionId),

    #[error("position {0} is not owned")]
    NotOwned(PositionId),

    #[error("no gradients captured for position {0}")]
    NoGradients(PositionId),

    #[error("importance report has no accumulated steps")]
    NoSteps,

    #[error("importance report is already final")]
    AlreadyFinal,

    #[error("importance report is not final")]
    NotFinal,

    #[error("invalid prune ratio {0}: must lie in (0, 0.5]")]
    InvalidRatio(f64),

    #[error("insufficient distinct donors: ratio {ratio} exceeds 0.5, cannot pick {m} donors from {n} positions")]
    InsufficientDonors { ratio: f64, m: usize, n: usize },

    #[error("need at least 2 scored positions to plan, got {0}")]
    TooFewPositions(usize),

    #[error("non-finite coefficient {0}")]
    NonFiniteCoefficient(f64),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt payload: expected {expected} bytes, found {found}")]
    CorruptPayload { expected: usize, found: usize },

    #[error("dangling donor reference: position {position} points at {donor}")]
    DanglingDonor { position: usize, donor: usize },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PearError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        PearError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        PearError::Malformed {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PearError::Io {
            path: path.into(),
            source,
        }
    }
}
