use crate::dynamics::IterationReport;
use crate::spectral::TimePath;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient resolution: {0}")]
    InsufficientResolution(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Picard increments stopped shrinking; retry on a window of `suggested_window`.
    #[error("fixed-point map is not contracting on a window of {window} (try {suggested_window})")]
    NonContraction {
        window: f64,
        suggested_window: f64,
        report: Box<IterationReport>,
    },

    #[error("fixed-point iteration diverged after {} iterations", report.iterations)]
    Divergence { report: Box<IterationReport> },

    /// A continuation window failed; `partial` holds the glued path up to `start_time`.
    #[error("continuation window {window_index} starting at t = {start_time} failed: {source}")]
    WindowFailed {
        window_index: usize,
        start_time: f64,
        partial: Box<TimePath>,
        #[source]
        source: Box<Error>,
    },

    /// Failure of one ensemble member.
    #[error("path {index}: {source}")]
    InPath {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::NonContraction { .. } | Error::Divergence { .. } => 3,
            Error::WindowFailed { source, .. } => match source.exit_code() {
                1 => 3,
                code => code,
            },
            Error::InPath { source, .. } => source.exit_code(),
            Error::InsufficientData(_) | Error::InsufficientResolution(_) => 4,
            _ => 1,
        }
    }

    /// Tags the error with the ensemble member it came from.
    pub fn in_path(self, index: u64) -> Error {
        Error::InPath {
            index,
            source: Box::new(self),
        }
    }
}

pub(crate) fn dimension(what: impl Into<String>) -> Error {
    Error::Dimension(what.into())
}
