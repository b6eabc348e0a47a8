use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("axis {axis} is out of range for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    Detached,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("class {class} contributes {actual} samples to the batch, expected {expected}")]
    UnbalancedBatch {
        class: usize,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} is outside 0..{classes}")]
    InvalidLabel { label: usize, classes: usize },

    #[error("targeted refinement needs labels on every pattern")]
    MissingLabels,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("{0} needs at least one sample")]
    Empty(&'static str),

    #[error("dataset has no ground-truth pairing")]
    MissingPairing,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

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

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn format(detail: impl Into<String>) -> Self {
        Error::Format(detail.into())
    }
}
