use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A dataset invariant does not hold at the given sample.
    #[error("invalid dataset at sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },

    #[error("no labeled samples")]
    NoLabeledSamples,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    /// An iterative procedure diverged. `trace` holds the per-epoch
    /// objective values recorded up to the abort.
    #[error("{what} diverged at epoch {epoch}: {reason}")]
    Diverged {
        what: &'static str,
        epoch: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("format error at line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for numerical divergence, false for everything else
    /// (validation, I/O, parsing).
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
