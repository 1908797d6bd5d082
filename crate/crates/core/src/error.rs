use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context} at flat index {index} (value {value})")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("feature grid too small: {h}x{w} (directional scans need at least 2x2)")]
    GridTooSmall { h: usize, w: usize },

    #[error("unknown tap '{0}'")]
    UnknownTap(String),

    #[error("missing layer weight '{0}'")]
    MissingWeight(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unknown dtype code '{0}'")]
    UnknownDtype(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("malformed container: {0}")]
    MalformedContainer(String),

    #[error("diverged at iteration {iter}: {reason}")]
    Diverged { iter: usize, reason: String },

    #[error("image decode error: {0}")]
    ImageDecode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
