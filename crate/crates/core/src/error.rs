use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("outside the principal-branch domain: {0}")]
    Domain(String),

    #[error("secular iteration did not converge after {iterations} iterations")]
    IterationDiverged {
        iterations: usize,
        trace: Vec<Complex64>,
    },

    #[error("pole classification is ambiguous: {0}")]
    AmbiguousClassification(String),

    #[error("degenerate boundary trace: {0}")]
    DegenerateTrace(String),

    #[error("capacity C_n(omega) is required for n >= 3")]
    MissingCapacity,

    #[error("near-field expansion mismatch: relative deviation {deviation:.3e}")]
    ExpansionMismatch { deviation: f64 },

    #[error("poor far-field fit: relative residual spread {spread:.3e}")]
    PoorFit { spread: f64 },

    #[error("tail fit for mode {mode} is not exponential (R^2 = {r_squared:.5})")]
    TailFit { mode: usize, r_squared: f64 },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("eigensolver failed: {message}")]
    Solver {
        message: String,
        residuals: Vec<f64>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
