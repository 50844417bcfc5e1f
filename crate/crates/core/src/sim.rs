//! Seeded stochastic rollouts of the closed-loop system, cost evaluation,
//! and the deception measure.
//!
//! Every path's noise stream is a pure function of `(master_seed,
//! path_index)`: each path gets its own counter-based substream, so
//! Monte-Carlo results are independent of execution order and worker count.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::detector;
use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::solver::SolvedPolicy;

/// Identifies one path's noise substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub path_index: u64,
}

/// One realized closed-loop path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// States `x_t = (v_t, p_t)`, `t = 0..=T`.
    pub x: Vec<DVector<f64>>,
    /// Controls `u_t = (alpha_t, beta_t)`, `t = 0..T-1`.
    pub u: Vec<DVector<f64>>,
    /// Noises `w_t = (Z_t, Y_t)`, `t = 0..T-1`.
    pub w: Vec<DVector<f64>>,
    /// Realized primary cost along this path (deception term excluded).
    pub primary_cost: f64,
    /// Realized cumulative log-likelihood ratio, `t = 0..=T`.
    pub loglr: Vec<f64>,
}

impl Trajectory {
    /// CSV dump with one row per `t`; control and noise columns are empty on
    /// the terminal row.
    pub fn to_csv(&self, n: usize) -> String {
        let mut header = String::from("t");
        for (prefix, count) in [
            ("v", n),
            ("p", n),
            ("alpha", n),
            ("beta", n),
            ("Z", n),
            ("Y", n),
        ] {
            for i in 0..count {
                header.push_str(&format!(",{prefix}{i}"));
            }
        }
        header.push_str(",loglr\n");
        let mut out = header;
        for t in 0..self.x.len() {
            out.push_str(&format!("{t}"));
            for i in 0..2 * n {
                out.push_str(&format!(",{}", self.x[t][i]));
            }
            for i in 0..2 * n {
                if t < self.u.len() {
                    out.push_str(&format!(",{}", self.u[t][i]));
                } else {
                    out.push(',');
                }
            }
            for i in 0..2 * n {
                if t < self.w.len() {
                    out.push_str(&format!(",{}", self.w[t][i]));
                } else {
                    out.push(',');
                }
            }
            out.push_str(&format!(",{}\n", self.loglr[t]));
        }
        out
    }
}

/// Draws the process noise `w_t = (Z_t, Y_t)` for every step of one path.
///
/// The stream is keyed by the master seed with the path index as the
/// ChaCha stream counter; draws are ordered `Z` block then `Y` block per
/// step, so the noise at step `t` depends only on `(master_seed,
/// path_index, t)`.
pub fn sample_noises(spec: &ProblemSpec, seed: SeedSpec) -> Vec<DVector<f64>> {
    let n = spec.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.master_seed);
    rng.set_stream(seed.path_index);
    (0..spec.horizon())
        .map(|_| {
            let z_raw =
                DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let y_raw =
                DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let mut w = DVector::zeros(2 * n);
            w.rows_mut(0, n).copy_from(&(spec.noise_factor_z() * z_raw));
            w.rows_mut(n, n).copy_from(&(spec.noise_factor_y() * y_raw));
            w
        })
        .collect()
}

/// Rolls out the closed loop `x_{t+1} = A x_t + B u_t + w_t` under the
/// optimal policy, filling states, controls, noises, realized primary cost,
/// and the realized log-likelihood-ratio path.
pub fn rollout(spec: &ProblemSpec, policy: &SolvedPolicy, seed: SeedSpec) -> Trajectory {
    let horizon = spec.horizon();
    let a = spec.a_matrix();
    let w = sample_noises(spec, seed);
    let mut x = Vec::with_capacity(horizon + 1);
    let mut u = Vec::with_capacity(horizon);
    x.push(spec.x0().clone());
    for t in 0..horizon {
        let u_t = policy
            .control(t, &x[t])
            .expect("policy horizon matches spec");
        let next = &a * &x[t] + &u_t + &w[t];
        x.push(next);
        u.push(u_t);
    }
    let loglr = detector::loglr_path(spec, &x);
    let mut traj = Trajectory {
        x,
        u,
        w,
        primary_cost: 0.0,
        loglr,
    };
    traj.primary_cost = primary_cost(spec, &traj);
    traj
}

/// Realized primary cost
/// `sum_t [alpha^T R_alpha alpha + beta^T R_beta beta + (v - vbar_t)^T R_v (v - vbar_t)] / 2
///  + (v_T - vbar_T)^T T_v (v_T - vbar_T) / 2`.
pub fn primary_cost(spec: &ProblemSpec, traj: &Trajectory) -> f64 {
    let n = spec.n();
    let mut cost = 0.0;
    for t in 0..traj.u.len() {
        let alpha = traj.u[t].rows(0, n);
        let beta = traj.u[t].rows(n, n);
        let v_err = traj.x[t].rows(0, n) - spec.vbar(t);
        cost += 0.5 * (spec.r_alpha() * alpha).dot(&alpha)
            + 0.5 * (spec.r_beta() * beta).dot(&beta)
            + 0.5 * (spec.r_v() * &v_err).dot(&v_err);
    }
    let t_end = traj.x.len() - 1;
    let v_err = traj.x[t_end].rows(0, n) - spec.vbar(t_end);
    cost + 0.5 * (spec.t_v() * &v_err).dot(&v_err)
}

/// Realized augmented cost `primary - lambda * loglr_T` along one path; its
/// mean over paths equals the value function at the initial state.
pub fn augmented_cost(spec: &ProblemSpec, traj: &Trajectory) -> f64 {
    traj.primary_cost - spec.lambda() * traj.loglr[traj.loglr.len() - 1]
}

/// Deception measure: how far the realized deception channel moved from the
/// null controller toward the full deceptive law, as a ratio of
/// root-sum-of-squares distances.
///
/// All three controllers are evaluated along this trajectory's own states
/// (a common realization), which makes the endpoints exact: 0 at zero
/// intensity, 1 at the boundary intensity where the optimal law coincides
/// with the deceptive law pointwise in state.
pub fn deception_measure(spec: &ProblemSpec, traj: &Trajectory) -> Result<f64> {
    let n = spec.n();
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..traj.u.len() {
        let beta = traj.u[t].rows(n, n);
        let target = spec.deception_target(t, &traj.x[t]);
        num += beta.norm_squared();
        den += target.norm_squared();
    }
    let den = den.sqrt();
    if den < 1e-14 {
        return Err(Error::DegeneratePattern);
    }
    Ok(num.sqrt() / den)
}
