//! Error type shared across the crate.

use thiserror::Error;

/// Errors from problem validation, solving, and analysis.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A field has the wrong shape.
    #[error("dimension mismatch in {name}: expected {expected}, got {got}")]
    DimensionMismatch {
        name: String,
        expected: String,
        got: String,
    },

    /// A weight or covariance matrix is not symmetric within tolerance.
    #[error("matrix {name} is not symmetric (max relative asymmetry {deviation:.3e})")]
    NotSymmetric { name: String, deviation: f64 },

    /// A weight or covariance matrix is not positive definite.
    #[error("matrix {name} is not positive definite (smallest eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveDefinite { name: String, min_eigenvalue: f64 },

    /// The deception intensity must be nonnegative.
    #[error("deception intensity must be nonnegative, got {0}")]
    NegativeIntensity(f64),

    /// A time index fell outside the valid range.
    #[error("time index {t} out of range (valid 0..={max})")]
    TimeOutOfRange { t: usize, max: usize },

    /// The well-posedness condition fails for this intensity.
    #[error(
        "backward recursion is not well-posed at lambda = {lambda} \
         (smallest eigenvalue of the condition matrix is {min_eigenvalue:.6e}); \
         pass force=true to attempt the solve anyway"
    )]
    NotWellPosed { lambda: f64, min_eigenvalue: f64 },

    /// The control Hessian became singular or ill-conditioned during the solve.
    #[error(
        "control Hessian at step {t} is singular or ill-conditioned \
         (condition number {cond:.3e}) at lambda = {lambda}"
    )]
    IllConditioned { t: usize, lambda: f64, cond: f64 },

    /// The backward recursion produced a non-finite value.
    #[error("backward recursion produced non-finite values at step {t}")]
    NonFiniteRecursion { t: usize },

    /// An error probability was outside its open interval.
    #[error("{name} must lie in (0, 0.5), got {value}")]
    InvalidErrorProbability { name: &'static str, value: f64 },

    /// A confidence level was outside (0, 1).
    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidSignificance(f64),

    /// Sample count must be positive.
    #[error("sample count must be at least 1, got {0}")]
    InvalidSampleCount(usize),

    /// Closed-form moments and the analytical bound require a zero offset pattern.
    #[error(
        "moment recursions require fd = 0 at every step (offset at step {t} has norm {norm:.3e})"
    )]
    NonzeroPatternOffset { t: usize, norm: f64 },

    /// The deception pattern produces no deceptive control along this path.
    #[error("degenerate pattern: the hypothesis-H1 control is zero along this path")]
    DegeneratePattern,

    /// No grid point satisfies the well-posedness condition.
    #[error("no admissible intensity in the search grid")]
    EmptyGrid,

    /// Problem file parsing failed.
    #[error("problem file: {0}")]
    Parse(String),

    /// Invalid argument to a numeric routine.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
