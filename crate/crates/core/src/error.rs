use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("integrity error in {path}: expected {expected} bytes, found {actual}")]
    Integrity {
        path: String,
        expected: u64,
        actual: u64,
    },

    #[error("corrupt blob {path}: {reason}")]
    CorruptBlob { path: String, reason: String },

    #[error("unsupported schema version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("numerical failure in `{tensor}`: {detail}")]
    NumericalFailure { tensor: String, detail: String },

    #[error("training diverged at epoch {epoch}: loss {loss:.4e} exceeded 10x initial {initial:.4e}")]
    Divergence {
        epoch: usize,
        loss: f64,
        initial: f64,
        curve: Vec<f64>,
    },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("degenerate alignment row {row}: kernel mass {mass:.3e}")]
    DegenerateRow { row: usize, mass: f64 },

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Schema(_) => "schema",
            Error::Integrity { .. } => "integrity",
            Error::CorruptBlob { .. } => "corrupt_blob",
            Error::Version { .. } => "version",
            Error::NumericalFailure { .. } => "numerical_failure",
            Error::Divergence { .. } => "divergence",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::Stratification(_) => "stratification",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
