use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A trial state left the admissible set (J <= 0 or exponent overflow).
    /// Callers treat this as a line-search trigger, not a hard failure.
    #[error("non-admissible state (J <= 0 or energy overflow)")]
    NonAdmissible,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("Newton did not converge at step {step} after {iters} iterations (residual ratio {ratio:.3e})")]
    Convergence { step: usize, iters: usize, ratio: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
