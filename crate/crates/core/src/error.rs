use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input; maps to CLI exit code 2.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("positivity error: {0}")]
    Positivity(String),

    #[error("({t}, {s}) lies outside the kernel domain 0 <= s <= t <= {horizon}")]
    OutsideTriangle { t: f64, s: f64, horizon: f64 },

    #[error("time {0} is not a grid node")]
    OffGrid(f64),

    #[error("X fell to {value:e} on path {path} at step {step}")]
    PositivityBreach { path: usize, step: usize, value: f64 },

    #[error("regression failed{}: {reason} (condition number {condition:e})", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Regression {
        step: Option<usize>,
        condition: f64,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("Picard iteration did not converge after {} passes (last distance {:e})", log.len(), log.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { log: Vec<f64> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Whether the error stems from bad input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Positivity(_) | Error::Parse(_) | Error::OutsideTriangle { .. } | Error::OffGrid(_)
        )
    }
}
