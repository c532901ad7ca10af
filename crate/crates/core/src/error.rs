use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid input: {0}")]
    Input(String),

    /// Retraction left the SPD cone even after the jitter floor; the caller
    /// should shrink the step.
    #[error("retraction step too large")]
    StepTooLarge,

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("instance too large for the exact solver: {cells} cells, limit {limit}")]
    TooLarge { cells: usize, limit: usize },

    #[error("transport plan did not converge, dual gradient is unreliable")]
    GradientUnreliable,

    #[error("environment contract violated: {0}")]
    Contract(String),
}

impl Error {
    /// Whether the error stems from floating-point trouble rather than bad
    /// caller input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite
                | Error::StepTooLarge
                | Error::Numeric(_)
                | Error::GradientUnreliable
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
