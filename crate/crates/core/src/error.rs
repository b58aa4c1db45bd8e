use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Invalid or inconsistent inputs (shapes, probabilities, stepsizes).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("value iteration did not converge after {iters} sweeps (last sweep change {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("identity check unsupported: {0}")]
    UnsupportedIdentity(String),

    /// A runtime-verified invariant failed.
    #[error("invariant violated: {0}")]
    Violation(String),

    /// A hypothesis of a bound evaluator does not hold for the supplied parameters.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// The bound exists but does not apply at the requested parameters.
    #[error("not applicable: {0}")]
    Inapplicable(String),
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
