//! Closed-form state moments and expected log-likelihood ratio, Monte-Carlo
//! stealthiness estimation with score confidence intervals, and the
//! intensity grid search.
//!
//! Under the optimal policy with a zero pattern offset, the closed-loop
//! state is Gaussian with
//!
//! ```text
//! m_k = K_{k-1}^T m_{k-1} - H_{k-1}^-1 s_k,            m_0 = x_0
//! Sigma_k = K_{k-1}^T Sigma_{k-1} K_{k-1} + Sigma_w,   Sigma_0 = 0
//! ```
//!
//! (the covariance recursion is implemented in its expanded second-moment
//! form and cross-checked against this rearrangement in the tests), and the
//! expected statistic is the trace formula implemented by
//! [`expected_loglr`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::bound;
use crate::detector::SprtConfig;
use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::sim::{rollout, SeedSpec};
use crate::solver::{backward_solve, wellposedness_holds, SolvedPolicy};
use crate::stats::inverse_normal_tail;

/// Gaussian moments of the optimally controlled state, `k = 0..=T`.
#[derive(Debug, Clone)]
pub struct StateMoments {
    /// Means `m_k`.
    pub mean: Vec<DVector<f64>>,
    /// Covariances `Sigma_k` (symmetric PSD).
    pub cov: Vec<DMatrix<f64>>,
    /// Closed-loop matrices `K_k = A^T - G_k H_k^-1`, copied from the policy.
    pub k: Vec<DMatrix<f64>>,
}

fn require_zero_offset(spec: &ProblemSpec) -> Result<()> {
    for (t, fd) in spec.pattern().fd.iter().enumerate() {
        let norm = fd.norm();
        if norm != 0.0 {
            return Err(Error::NonzeroPatternOffset { t, norm });
        }
    }
    Ok(())
}

/// Propagates mean and covariance of the closed-loop state.
///
/// Requires a zero pattern offset (`fd = 0` at every step).
pub fn state_moments(spec: &ProblemSpec, policy: &SolvedPolicy) -> Result<StateMoments> {
    require_zero_offset(spec)?;
    let horizon = spec.horizon();
    let dim = spec.state_dim();
    let sigma_w = spec.noise_cov();

    let mut mean = Vec::with_capacity(horizon + 1);
    let mut cov = Vec::with_capacity(horizon + 1);
    mean.push(spec.x0().clone());
    cov.push(DMatrix::zeros(dim, dim));

    for k in 1..=horizon {
        let kk = &policy.aux.k[k - 1];
        let h_inv = &policy.aux.h_inv[k - 1];
        let m_prev = &mean[k - 1];
        let c_prev = &cov[k - 1];
        let drift = h_inv * &policy.s[k];

        let m_k = kk.transpose() * m_prev - &drift;
        // Expanded second-moment form of the covariance recursion.
        let second = kk.transpose() * (c_prev + m_prev * m_prev.transpose()) * kk
            - kk.transpose() * m_prev * drift.transpose()
            - &drift * (m_prev.transpose() * kk)
            + &drift * drift.transpose()
            + &sigma_w
            - &m_k * m_k.transpose();
        cov.push(crate::linalg::symmetrize(&second));
        mean.push(m_k);
    }

    Ok(StateMoments {
        mean,
        cov,
        k: policy.aux.k.clone(),
    })
}

/// Closed-form `E log L_t` under the optimal policy:
///
/// ```text
/// -1/2 sum_{k<t} { 2 s_{k+1}^T H_k^-1 E2 S F_k^T m_k
///                  + tr[(F_k S F_k^T + 2 G_k H_k^-1 E2 S F_k^T)(Sigma_k + m_k m_k^T)] }
/// ```
pub fn expected_loglr(
    spec: &ProblemSpec,
    policy: &SolvedPolicy,
    moments: &StateMoments,
    t: usize,
) -> Result<f64> {
    require_zero_offset(spec)?;
    if t > spec.horizon() {
        return Err(Error::TimeOutOfRange {
            t,
            max: spec.horizon(),
        });
    }
    let s_inv = spec.sigma_y2_inv();
    let e2 = spec.e2();
    let mut total = 0.0;
    for k in 0..t {
        let f_k = spec.stacked_pattern(k);
        let coupling = bound::coupling_matrix(spec, policy, k);
        let m_k = &moments.mean[k];
        let second_moment = &moments.cov[k] + m_k * m_k.transpose();
        let linear = 2.0
            * (&policy.aux.h_inv[k] * &policy.s[k + 1])
                .dot(&(&e2 * (s_inv * (f_k.transpose() * m_k))));
        total += linear + (coupling * second_moment).trace();
    }
    let value = -0.5 * total;
    // Normalize -0.0 so empty sums print as 0.
    Ok(if value == 0.0 { 0.0 } else { value })
}

/// Score (Wilson-type) confidence interval for a binomial proportion:
/// with `z = Q^-1(c/2)`, `gamma = z^2/n`,
/// `theta = z sqrt((p(1-p) + z^2/4n)/n)`, the interval is
/// `((p + gamma/2 -+ theta) / (1 + gamma))`, clamped to [0, 1].
pub fn score_ci(p_hat: f64, n: usize, c: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidSampleCount(n));
    }
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidSignificance(c));
    }
    let z = inverse_normal_tail(c / 2.0);
    let n_f = n as f64;
    let gamma = z * z / n_f;
    let theta = z * ((p_hat * (1.0 - p_hat) + z * z / (4.0 * n_f)) / n_f).sqrt();
    // The exact interval always brackets the estimate; the clamps also kill
    // roundoff at the endpoints (theta = gamma/2 exactly when p_hat is 0 or 1).
    let lo = ((p_hat + 0.5 * gamma - theta) / (1.0 + gamma)).clamp(0.0, p_hat.min(1.0));
    let hi = ((p_hat + 0.5 * gamma + theta) / (1.0 + gamma)).clamp(p_hat.max(0.0), 1.0);
    Ok((lo, hi))
}

/// Detection estimate for one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionEstimate {
    pub t: usize,
    /// Fraction of paths with `loglr_t >= log U`.
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Monte-Carlo estimate of the per-step detection probability.
#[derive(Debug, Clone, Serialize)]
pub struct McDetection {
    pub estimates: Vec<DetectionEstimate>,
    pub n_paths: usize,
    /// Significance level of the confidence intervals.
    pub significance: f64,
    /// Set when the sample is too small for the interval to be meaningful.
    pub warning: Option<String>,
}

impl McDetection {
    pub fn max_p_hat(&self) -> f64 {
        self.estimates.iter().map(|e| e.p_hat).fold(0.0, f64::max)
    }

    pub fn max_ci_hi(&self) -> f64 {
        self.estimates.iter().map(|e| e.ci_hi).fold(0.0, f64::max)
    }
}

/// Estimates `P(loglr_t >= log U)` for every `t = 0..=T` from `n_paths`
/// seeded rollouts, with a score confidence interval at level
/// `significance` per step.
///
/// One common path set serves every `t`; counts are reduced with integer
/// sums, so the result does not depend on worker scheduling.
pub fn mc_detection(
    spec: &ProblemSpec,
    policy: &SolvedPolicy,
    config: &SprtConfig,
    n_paths: usize,
    master_seed: u64,
    significance: f64,
) -> Result<McDetection> {
    if n_paths == 0 {
        return Err(Error::InvalidSampleCount(0));
    }
    let horizon = spec.horizon();
    let log_u = config.log_upper();
    let counts = (0..n_paths as u64)
        .into_par_iter()
        .fold(
            || vec![0u64; horizon + 1],
            |mut acc, path_index| {
                let traj = rollout(
                    spec,
                    policy,
                    SeedSpec {
                        master_seed,
                        path_index,
                    },
                );
                for (t, &l) in traj.loglr.iter().enumerate() {
                    if l >= log_u {
                        acc[t] += 1;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; horizon + 1],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    let estimates = counts
        .iter()
        .enumerate()
        .map(|(t, &k)| {
            let p_hat = k as f64 / n_paths as f64;
            let (ci_lo, ci_hi) = score_ci(p_hat, n_paths, significance)?;
            Ok(DetectionEstimate {
                t,
                p_hat,
                ci_lo,
                ci_hi,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(McDetection {
        estimates,
        n_paths,
        significance,
        warning: (n_paths < 100)
            .then(|| format!("only {n_paths} paths; confidence intervals are unreliable")),
    })
}

/// How the stealthiness constraint is evaluated per grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Upper confidence limit of the Monte-Carlo estimate.
    Mc,
    /// Analytical concentration bound.
    Bound,
}

/// One `(lambda, t)` row of the stealthiness table.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StealthRow {
    pub lambda: f64,
    pub t: usize,
    pub p_hat: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub bound: Option<f64>,
}

/// Verdict for one grid point: whether `max_t` of the chosen metric stays
/// at or below the tolerance.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LambdaVerdict {
    pub lambda: f64,
    pub max_metric: f64,
    pub passes: bool,
}

/// Grid point skipped by the search, with the reason.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedLambda {
    pub lambda: f64,
    pub reason: String,
}

/// Full output of the intensity search.
#[derive(Debug, Clone, Serialize)]
pub struct StealthReport {
    pub mode: SearchMode,
    pub epsilon: f64,
    pub n_samples: usize,
    pub lambda_grid: Vec<f64>,
    pub rows: Vec<StealthRow>,
    pub verdicts: Vec<LambdaVerdict>,
    pub skipped: Vec<SkippedLambda>,
    /// Largest admissible grid intensity whose metric stays within the
    /// tolerance, if any.
    pub selected: Option<f64>,
}

impl StealthReport {
    /// CSV rows `lambda, t, p_hat, ci_lo, ci_hi, bound` with a header.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("lambda,t,p_hat,ci_lo,ci_hi,bound\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.lambda,
                row.t,
                fmt(row.p_hat),
                fmt(row.ci_lo),
                fmt(row.ci_hi),
                fmt(row.bound),
            ));
        }
        out
    }
}

/// Uniform grid of 51 points over the admissible intensity range.
pub fn default_lambda_grid(spec: &ProblemSpec) -> Vec<f64> {
    let lambda_max = crate::solver::admissible_lambda_max(spec);
    (0..51).map(|i| lambda_max * i as f64 / 50.0).collect()
}

/// Grid search for the largest intensity satisfying the stealthiness
/// constraint `max_t metric(lambda, t) <= epsilon`.
///
/// In [`SearchMode::Mc`] the metric is the upper confidence limit of the
/// per-step detection estimate; in [`SearchMode::Bound`] it is the
/// analytical bound. Grid points failing the well-posedness condition are
/// skipped with a note. The same master seed (hence the same path set) is
/// reused for every grid point.
#[allow(clippy::too_many_arguments)]
pub fn lambda_search(
    spec_template: &ProblemSpec,
    epsilon: f64,
    grid: &[f64],
    config: &SprtConfig,
    n_paths: usize,
    master_seed: u64,
    significance: f64,
    mode: SearchMode,
) -> Result<StealthReport> {
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let mut skipped = Vec::new();
    let mut any_admissible = false;

    for &lambda in grid {
        let spec = match spec_template.with_lambda(lambda) {
            Ok(s) => s,
            Err(e) => {
                skipped.push(SkippedLambda {
                    lambda,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let wp = wellposedness_holds(&spec);
        if !wp.holds {
            skipped.push(SkippedLambda {
                lambda,
                reason: format!(
                    "well-posedness fails (condition eigenvalue {:.3e})",
                    wp.min_eigenvalue
                ),
            });
            continue;
        }
        any_admissible = true;
        let policy = backward_solve(&spec)?;

        let max_metric = match mode {
            SearchMode::Mc => {
                let mc = mc_detection(&spec, &policy, config, n_paths, master_seed, significance)?;
                for e in &mc.estimates {
                    rows.push(StealthRow {
                        lambda,
                        t: e.t,
                        p_hat: Some(e.p_hat),
                        ci_lo: Some(e.ci_lo),
                        ci_hi: Some(e.ci_hi),
                        bound: None,
                    });
                }
                mc.max_ci_hi()
            }
            SearchMode::Bound => {
                let moments = state_moments(&spec, &policy)?;
                let mut max_bound = 0.0_f64;
                for t in 0..=spec.horizon() {
                    let row = bound::detection_bound(&spec, &policy, &moments, config, t)?;
                    max_bound = max_bound.max(row.bound);
                    rows.push(StealthRow {
                        lambda,
                        t,
                        p_hat: None,
                        ci_lo: None,
                        ci_hi: None,
                        bound: Some(row.bound),
                    });
                }
                max_bound
            }
        };
        verdicts.push(LambdaVerdict {
            lambda,
            max_metric,
            passes: max_metric <= epsilon,
        });
    }

    if !any_admissible {
        return Err(Error::EmptyGrid);
    }

    let selected = verdicts
        .iter()
        .filter(|v| v.passes)
        .map(|v| v.lambda)
        .fold(None, |acc: Option<f64>, l| {
            Some(acc.map_or(l, |a| a.max(l)))
        });

    Ok(StealthReport {
        mode,
        epsilon,
        n_samples: if mode == SearchMode::Mc { n_paths } else { 0 },
        lambda_grid: grid.to_vec(),
        rows,
        verdicts,
        skipped,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::demo_spec;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn moments_start_at_the_initial_state() {
        let spec = demo_spec(0.04);
        let policy = backward_solve(&spec).unwrap();
        let m = state_moments(&spec, &policy).unwrap();
        assert_eq!(m.mean[0], DVector::from_vec(vec![1.0, 4.0]));
        assert_eq!(m.cov[0], DMatrix::zeros(2, 2));
        for k in 0..=spec.horizon() {
            assert!(
                crate::linalg::min_symmetric_eigenvalue(&m.cov[k]) >= -1e-9,
                "covariance at k={k} not PSD"
            );
        }
    }

    #[test]
    fn covariance_matches_direct_rearrangement() {
        // Sigma_k = K^T Sigma_{k-1} K + Sigma_w is an equivalent form.
        let spec = demo_spec(0.3);
        let policy = backward_solve(&spec).unwrap();
        let m = state_moments(&spec, &policy).unwrap();
        let sigma_w = spec.noise_cov();
        for k in 1..=spec.horizon() {
            let direct =
                policy.aux.k[k - 1].transpose() * &m.cov[k - 1] * &policy.aux.k[k - 1] + &sigma_w;
            assert_relative_eq!(m.cov[k], direct, epsilon = 1e-10);
        }
    }

    #[test]
    fn vanishing_noise_gives_vanishing_covariance() {
        // The admissible intensity range scales with sigma_y2, so pick a
        // fixed fraction of it.
        let horizon = 20usize;
        let vbar: Vec<f64> = (0..=horizon)
            .map(|t| 1.0 - t as f64 / horizon as f64)
            .collect();
        let lambda = 10.0 * 1e-18 * 0.6;
        let spec = ProblemSpec::onedim(
            horizon, 1e-18, 1e-18, 1.0, 4.0, 1.0, 10.0, 1.0, 1.0, vbar, 0.5, -0.1, 0.0, lambda,
        )
        .unwrap();
        let policy = backward_solve(&spec).unwrap();
        let m = state_moments(&spec, &policy).unwrap();
        for k in 0..=horizon {
            assert!(
                m.cov[k].amax() <= 1e-12,
                "cov at k={k} is {}",
                m.cov[k].amax()
            );
        }
    }

    #[test]
    fn moments_require_zero_offset() {
        let horizon = 20usize;
        let vbar = (0..=horizon)
            .map(|t| 1.0 - t as f64 / horizon as f64)
            .collect();
        let spec = ProblemSpec::onedim(
            horizon, 0.05, 0.05, 1.0, 4.0, 1.0, 10.0, 1.0, 1.0, vbar, 0.5, -0.1, 0.2, 0.1,
        )
        .unwrap();
        let policy = backward_solve(&spec).unwrap();
        assert!(matches!(
            state_moments(&spec, &policy),
            Err(Error::NonzeroPatternOffset { .. })
        ));
    }

    #[test]
    fn expected_loglr_zero_at_time_zero_and_nonincreasing_without_intensity() {
        let spec = demo_spec(0.0);
        let policy = backward_solve(&spec).unwrap();
        let moments = state_moments(&spec, &policy).unwrap();
        assert_eq!(expected_loglr(&spec, &policy, &moments, 0).unwrap(), 0.0);
        let mut prev = 0.0;
        for t in 1..=spec.horizon() {
            let e = expected_loglr(&spec, &policy, &moments, t).unwrap();
            assert!(e <= 0.0, "E log L at t={t} is {e}");
            assert!(e <= prev + 1e-12, "not nonincreasing at t={t}");
            prev = e;
        }
    }

    #[test]
    fn score_ci_hand_example() {
        // p_hat = 0, n = 20000, c = 0.05: theta = gamma/2 and the interval
        // is (0, gamma/(1+gamma)) ~ (0, 1.92e-4).
        let (lo, hi) = score_ci(0.0, 20000, 0.05).unwrap();
        assert_eq!(lo, 0.0);
        assert_abs_diff_eq!(hi, 1.9204e-4, epsilon = 2e-7);
    }

    #[test]
    fn score_ci_symmetric_at_half() {
        for &n in &[100usize, 10_000, 1_000_000] {
            let (lo, hi) = score_ci(0.5, n, 0.05).unwrap();
            assert_abs_diff_eq!(0.5 - lo, hi - 0.5, epsilon = 1e-12);
        }
        // Midpoint approaches 1/2 as n grows (it is exactly 1/2 here).
        let (lo, hi) = score_ci(0.5, 1_000_000, 0.05).unwrap();
        assert_abs_diff_eq!(0.5 * (lo + hi), 0.5, epsilon = 1e-9);
        assert!(hi - lo < 0.005);
    }

    #[test]
    fn score_ci_width_shrinks_like_root_n() {
        for &p in &[0.02, 0.3, 0.5] {
            let (lo1, hi1) = score_ci(p, 20_000, 0.05).unwrap();
            let (lo2, hi2) = score_ci(p, 40_000, 0.05).unwrap();
            let ratio = (hi2 - lo2) / (hi1 - lo1);
            assert!(
                (0.69..=0.73).contains(&ratio),
                "width ratio {ratio} out of range at p = {p}"
            );
        }
    }

    #[test]
    fn score_ci_rejects_bad_inputs() {
        assert!(score_ci(0.1, 0, 0.05).is_err());
        assert!(score_ci(0.1, 10, 0.0).is_err());
        assert!(score_ci(0.1, 10, 1.0).is_err());
    }

    #[test]
    fn mc_detection_counts_are_scheduling_independent() {
        let spec = demo_spec(0.3);
        let policy = backward_solve(&spec).unwrap();
        let config = SprtConfig::from_error_probabilities(0.01, 0.01).unwrap();
        let a = mc_detection(&spec, &policy, &config, 500, 7, 0.05).unwrap();
        let b = mc_detection(&spec, &policy, &config, 500, 7, 0.05).unwrap();
        for (x, y) in a.estimates.iter().zip(&b.estimates) {
            assert_eq!(x.p_hat, y.p_hat);
        }
        assert!(a.warning.is_none());
        let small = mc_detection(&spec, &policy, &config, 50, 7, 0.05).unwrap();
        assert!(small.warning.is_some());
    }

    #[test]
    fn detection_interval_ordering() {
        let spec = demo_spec(0.1);
        let policy = backward_solve(&spec).unwrap();
        let config = SprtConfig::from_error_probabilities(0.01, 0.01).unwrap();
        let mc = mc_detection(&spec, &policy, &config, 400, 3, 0.05).unwrap();
        for e in &mc.estimates {
            assert!(0.0 <= e.ci_lo && e.ci_lo <= e.p_hat);
            assert!(e.p_hat <= e.ci_hi && e.ci_hi <= 1.0);
        }
    }

    #[test]
    fn vacuous_tolerance_selects_largest_admissible_point() {
        let spec = demo_spec(0.0);
        let config = SprtConfig::from_error_probabilities(0.01, 0.01).unwrap();
        let grid = [0.0, 0.25, 0.5, 0.6];
        let report =
            lambda_search(&spec, 1.0, &grid, &config, 200, 0, 0.05, SearchMode::Mc).unwrap();
        assert_eq!(report.selected, Some(0.5));
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].lambda, 0.6);
    }

    #[test]
    fn verdict_is_monotone_in_tolerance() {
        let spec = demo_spec(0.0);
        let config = SprtConfig::from_error_probabilities(0.01, 0.01).unwrap();
        let grid = [0.0, 0.1, 0.3];
        let report =
            lambda_search(&spec, 0.02, &grid, &config, 300, 11, 0.05, SearchMode::Mc).unwrap();
        // Re-judge the same metric table at a larger tolerance: every pass
        // at 0.02 must remain a pass.
        for v in &report.verdicts {
            if v.passes {
                assert!(v.max_metric <= 0.05);
            }
        }
    }

    #[test]
    fn empty_admissible_grid_is_an_error() {
        let spec = demo_spec(0.0);
        let config = SprtConfig::from_error_probabilities(0.01, 0.01).unwrap();
        let err = lambda_search(
            &spec,
            0.02,
            &[0.7, 0.9],
            &config,
            100,
            0,
            0.05,
            SearchMode::Mc,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyGrid));
    }

    #[test]
    fn default_grid_spans_the_admissible_range() {
        let grid = default_lambda_grid(&demo_spec(0.0));
        assert_eq!(grid.len(), 51);
        assert_eq!(grid[0], 0.0);
        assert_relative_eq!(grid[50], 0.5, epsilon = 1e-9);
    }
}
