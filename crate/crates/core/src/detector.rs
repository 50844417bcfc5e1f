//! The observer side: SPRT thresholds, the log-likelihood-ratio statistic,
//! and the per-step three-way decision.
//!
//! The observer sees full states and tests "no deception" (H0) against the
//! known deceptive feedback law (H1). Because both hypotheses share the
//! `v`-dynamics, the statistic depends only on position innovations:
//!
//! ```text
//! log L_t = 1/2 sum_{k<t} [ |p_{k+1} - v_k - p_k|^2_{S}
//!                         - |p_{k+1} - v_k - p_k - Fb_k v_k - Fc_k p_k - fd_k|^2_{S} ]
//! ```
//!
//! with `S = sigma_y2^-1`; no knowledge of the task control is required.

use serde::{Deserialize, Serialize};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::sim::Trajectory;

/// SPRT thresholds derived from prescribed error probabilities:
/// `U = (1 - b) / a` and `L = b / (1 - a)` bound the type-I and type-II
/// error probabilities by `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtConfig {
    /// Type-I error bound `a` in (0, 1/2).
    pub a: f64,
    /// Type-II error bound `b` in (0, 1/2).
    pub b: f64,
    /// Upper threshold `U` on the likelihood ratio.
    pub upper: f64,
    /// Lower threshold `L` on the likelihood ratio.
    pub lower: f64,
}

impl SprtConfig {
    /// Derives thresholds from error probabilities `a, b` in (0, 1/2).
    pub fn from_error_probabilities(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a < 0.5) {
            return Err(Error::InvalidErrorProbability {
                name: "a",
                value: a,
            });
        }
        if !(b > 0.0 && b < 0.5) {
            return Err(Error::InvalidErrorProbability {
                name: "b",
                value: b,
            });
        }
        Ok(Self {
            a,
            b,
            upper: (1.0 - b) / a,
            lower: b / (1.0 - a),
        })
    }

    /// `log U`, the rejection threshold for the log statistic.
    pub fn log_upper(&self) -> f64 {
        self.upper.ln()
    }

    /// `log L`, the acceptance threshold for the log statistic.
    pub fn log_lower(&self) -> f64 {
        self.lower.ln()
    }
}

/// Three-way sequential decision at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    AcceptH0,
    RejectH0,
    Continue,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::AcceptH0 => f.write_str("accept_H0"),
            Decision::RejectH0 => f.write_str("reject_H0"),
            Decision::Continue => f.write_str("continue"),
        }
    }
}

/// SPRT statistic path and per-step decisions along one trajectory.
///
/// The test runs on the finite horizon without a truncation rule: every
/// step records its own decision and the trace never forces a terminal
/// verdict. A path may cross the acceptance threshold and later the
/// rejection threshold; detection statistics use `first_rejection`
/// regardless of earlier acceptance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtTrace {
    /// Cumulative log-likelihood ratio, `t = 0..=T` (`loglr[0] = 0`).
    pub loglr: Vec<f64>,
    /// Decision at each `t` against `log U` and `log L`.
    pub decisions: Vec<Decision>,
    /// First `t` with `loglr_t >= log U`, if any.
    pub first_rejection: Option<usize>,
}

impl SprtTrace {
    /// CSV rows `t, loglr, decision` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,loglr,decision\n");
        for (t, (l, d)) in self.loglr.iter().zip(&self.decisions).enumerate() {
            out.push_str(&format!("{t},{l},{d}\n"));
        }
        out
    }
}

/// One summand of the log-likelihood ratio at step `k`, computed from the
/// position innovation `p_next - v_k - p_k` only.
pub fn loglr_increment(
    spec: &ProblemSpec,
    v_k: &DVector<f64>,
    p_k: &DVector<f64>,
    p_next: &DVector<f64>,
    k: usize,
) -> Result<f64> {
    if k >= spec.horizon() {
        return Err(Error::TimeOutOfRange {
            t: k,
            max: spec.horizon() - 1,
        });
    }
    let s_inv = spec.sigma_y2_inv();
    let innovation = p_next - v_k - p_k;
    let target = &spec.pattern().fb[k] * v_k + &spec.pattern().fc[k] * p_k + &spec.pattern().fd[k];
    let off_h1 = &innovation - &target;
    Ok(0.5 * ((s_inv * &innovation).dot(&innovation) - (s_inv * &off_h1).dot(&off_h1)))
}

/// Cumulative log-likelihood ratio along a state path (`loglr[0] = 0`).
pub fn loglr_path(spec: &ProblemSpec, states: &[DVector<f64>]) -> Vec<f64> {
    let n = spec.n();
    let steps = states.len().saturating_sub(1);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for k in 0..steps {
        let v_k = states[k].rows(0, n).into_owned();
        let p_k = states[k].rows(n, n).into_owned();
        let p_next = states[k + 1].rows(n, n).into_owned();
        acc += loglr_increment(spec, &v_k, &p_k, &p_next, k)
            .expect("k < number of transitions <= horizon");
        out.push(acc);
    }
    out
}

/// Runs the SPRT decision rule along a completed trajectory.
pub fn run_sprt(spec: &ProblemSpec, traj: &Trajectory, config: &SprtConfig) -> SprtTrace {
    let loglr = loglr_path(spec, &traj.x);
    let log_u = config.log_upper();
    let log_l = config.log_lower();
    let decisions: Vec<Decision> = loglr
        .iter()
        .map(|&l| {
            if l >= log_u {
                Decision::RejectH0
            } else if l <= log_l {
                Decision::AcceptH0
            } else {
                Decision::Continue
            }
        })
        .collect();
    let first_rejection = decisions.iter().position(|d| *d == Decision::RejectH0);
    SprtTrace {
        loglr,
        decisions,
        first_rejection,
    }
}
