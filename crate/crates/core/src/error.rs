use thiserror::Error;

/// Errors raised while building, fitting or evaluating a mixture model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FmpreError {
    /// Shapes of the inputs do not agree with each other.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An input violates the documented contract of an operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A computation produced NaN or an infinity.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The stochastic assignment left a component without observations.
    #[error("component {component} received no observations")]
    EmptyPartition { component: usize },

    /// A normal-equation system could not be solved reliably.
    #[error("singular system ({context}); condition estimate {condition:e}; use a ridge or Liu-type penalty")]
    SingularSystem { context: String, condition: f64 },

    /// Every restart of the stochastic EM chain failed.
    #[error("fit failed after {attempts} restarts: {diagnostics}")]
    FitFailed { attempts: usize, diagnostics: String },

    /// The bias-correction search could not evaluate its objective.
    #[error("tuning failed: {0}")]
    TuningFailed(String),

    /// Percentile summaries need at least one value.
    #[error("summary undefined for metric {0}: no finite values")]
    SummaryUndefined(String),

    /// Malformed input file; `line` is 1-based.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FmpreError {
    fn from(err: std::io::Error) -> Self {
        FmpreError::Io(err.to_string())
    }
}

impl From<csv::Error> for FmpreError {
    fn from(err: csv::Error) -> Self {
        let line = err
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        FmpreError::Format {
            line,
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = FmpreError> = std::result::Result<T, E>;
