use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("{}field `{field}` out of range: {value}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    OutOfRange {
        line: Option<usize>,
        field: String,
        value: f64,
    },

    #[error("no samples")]
    NoSamples,

    #[error("degenerate labels: training set needs at least one matched and one unmatched sample")]
    DegenerateLabels,

    #[error("insufficient samples for D-ECE")]
    InsufficientSamples,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite ELBO at step {step}")]
    NonFiniteElbo { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => ErrorKind::Config,
            Error::NonFiniteElbo { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
