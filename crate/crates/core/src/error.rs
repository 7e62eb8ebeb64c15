use thiserror::Error;

use crate::weibull::FitDiagnostics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("{count} validation error(s):\n{}", .messages.join("\n"))]
    ValidationReport { count: usize, messages: Vec<String> },

    #[error("length mismatch: observed has {observed}, predicted has {predicted}")]
    LengthMismatch { observed: usize, predicted: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing predictor variable `{0}`")]
    MissingMetric(String),

    #[error("unknown metric name `{0}`")]
    UnknownMetric(String),

    #[error("design matrix is rank deficient; collinear column(s): {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("Weibull fit failed ({reason}) after {} iterations", .diagnostics.iterations)]
    WeibullFit {
        reason: String,
        diagnostics: FitDiagnostics,
    },

    #[error("optimizer did not converge: {0}")]
    NotConverged(String),

    #[error("leave-one-out contract violated: target plot `{0}` present in reference data")]
    LooViolation(String),

    #[error("cost function failed for subset [{}]: {message}", .subset.join(", "))]
    Cost { subset: Vec<String>, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from a numerical optimizer failing to settle.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::WeibullFit { .. } | Error::NotConverged(_))
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
