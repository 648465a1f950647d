use thiserror::Error;

/// Errors raised by the encryption schemes, the index and the persistence layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("division by near-zero entry {value:e} at index {index}")]
    DivisionByNearZero { index: usize, value: f64 },

    #[error("dimension {0} is odd; pad the vectors to an even dimension first")]
    OddDimension(usize),

    #[error("could not generate a well-conditioned {n}x{n} matrix after {attempts} attempts")]
    MatrixGeneration { n: usize, attempts: usize },

    #[error("singular linear system after {attempts} attempts")]
    SingularSystem { attempts: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("node {0} is already present in the graph")]
    DuplicateId(u32),

    #[error("node {0} is not present in the graph")]
    MissingId(u32),

    #[error("value {0} outside the logarithm domain")]
    LogDomain(f64),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("integrity check failed for {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
