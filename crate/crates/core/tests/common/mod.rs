//! Shared fixtures for the integration suites.
#![allow(dead_code)] // each suite uses its own subset

use stealth_lqr::ProblemSpec;

/// Scalar benchmark instance: horizon 20, noise variances 0.05, start
/// (1, 4), weights (R_alpha, R_beta, R_v, T_v) = (1, 10, 1, 1), reference
/// ramping 1 -> 0, pattern (0.5, -0.1, 0).
pub fn reference_spec(lambda: f64) -> ProblemSpec {
    reference_spec_with_horizon(20, lambda)
}

/// Same instance with a custom horizon (the reference still ramps 1 -> 0).
pub fn reference_spec_with_horizon(horizon: usize, lambda: f64) -> ProblemSpec {
    let vbar = (0..=horizon)
        .map(|t| 1.0 - t as f64 / horizon as f64)
        .collect();
    ProblemSpec::onedim(
        horizon, 0.05, 0.05, 1.0, 4.0, 1.0, 10.0, 1.0, 1.0, vbar, 0.5, -0.1, 0.0, lambda,
    )
    .unwrap()
}

/// Mean and standard error of a sample.
pub fn mean_and_se(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
