use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain violation in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor is not recorded on this tape")]
    NotOnTape,

    #[error("empty tape")]
    EmptyTape,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("seed ranges overlap between modalities (scene {0} would be paired)")]
    PairingViolation(u64),

    #[error("layout infeasible after {0} attempts")]
    InfeasibleLayout(usize),

    #[error("bad tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
