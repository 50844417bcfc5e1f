//! Deceptive linear-quadratic control against a sequential-hypothesis-testing
//! observer.
//!
//! A blue agent tracks a reference while injecting perturbations through a
//! dedicated control channel to mislead a red observer; the observer runs a
//! sequential probability ratio test on full state trajectories to detect
//! the deception. This crate provides:
//!
//! - [`model`]: problem data, validation, and the augmented stage-cost
//!   coefficients;
//! - [`solver`]: the backward recursions, well-posedness predicate, and the
//!   optimal deceptive feedback law;
//! - [`sim`]: seeded closed-loop rollouts, cost evaluation, and the
//!   deception measure;
//! - [`detector`]: SPRT thresholds, the log-likelihood-ratio statistic, and
//!   per-step decisions;
//! - [`analysis`]: closed-form state moments and expected statistic,
//!   Monte-Carlo detection estimates with score confidence intervals, and
//!   the intensity grid search;
//! - [`bound`]: the quadratic representation of the statistic and the
//!   concentration-based analytical detection bound.

pub mod analysis;
pub mod bound;
pub mod detector;
pub mod error;
pub mod linalg;
pub mod model;
pub mod sim;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use model::{DeceptionPattern, ProblemSpec, StageCoefficients};
pub use sim::{SeedSpec, Trajectory};
pub use solver::{SolvedPolicy, Wellposedness};

/// Shared fixtures for the unit-test modules.
#[cfg(test)]
pub(crate) mod test_util {
    use crate::model::ProblemSpec;

    /// The scalar benchmark instance used across the test suite: horizon 20,
    /// noise variances 0.05, start (1, 4), weights (1, 10, 1, 1), reference
    /// ramping from 1 to 0, pattern (0.5, -0.1, 0).
    pub fn demo_spec(lambda: f64) -> ProblemSpec {
        let horizon = 20usize;
        let vbar = (0..=horizon)
            .map(|t| 1.0 - t as f64 / horizon as f64)
            .collect();
        ProblemSpec::onedim(
            horizon, 0.05, 0.05, 1.0, 4.0, 1.0, 10.0, 1.0, 1.0, vbar, 0.5, -0.1, 0.0, lambda,
        )
        .unwrap()
    }
}
