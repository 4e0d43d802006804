use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("not available: {0}")]
    NotAvailable(String),

    #[error("numerical overflow at step {step}: non-finite state {state:?}")]
    NumericalOverflow { step: usize, state: Vec<f64> },

    #[error("singular gram matrix (gamma = {gamma:e}); increase the regularization")]
    SingularGram { gamma: f64 },

    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported dictionary family for this operation: {0}")]
    UnsupportedFamily(String),

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate:e})")]
    Divergence { epoch: usize, learning_rate: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("row {row}: {source}")]
    AtRow {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn at_row(self, row: usize) -> Self {
        Error::AtRow {
            row,
            source: Box::new(self),
        }
    }

    /// Strips any row annotations and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtRow { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NumericalOverflow { .. }
                | Error::SingularGram { .. }
                | Error::Eigen(_)
                | Error::Divergence { .. }
                | Error::InsufficientData(_)
                | Error::UndefinedCorrelation(_)
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
