use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("SVD did not converge after {sweeps} sweeps ({rows}x{cols}, frobenius norm {norm:e})")]
    SvdNoConvergence {
        sweeps: usize,
        rows: usize,
        cols: usize,
        norm: f64,
    },

    #[error("snapshot carries no position-embedding gradient")]
    NoPositionGradient,

    #[error("closed-form recovery requires architecture variant A")]
    ClosedFormRequiresVariantA,

    #[error("no unique label row; candidates {candidates:?}")]
    AmbiguousLabel { candidates: Vec<usize> },

    #[error("batch of {batch_size} shows only {distinct} label rows; repeated labels cannot be restored")]
    DuplicateLabelsUnsupported { batch_size: usize, distinct: usize },

    #[error("missing gradient entry `{0}`")]
    MissingEntry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite matching loss at iteration {iteration}")]
    AttackDiverged { iteration: usize },

    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
