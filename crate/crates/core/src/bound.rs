//! Analytical upper bound on the per-step detection probability.
//!
//! The realized statistic under the optimal policy is an explicit quadratic
//! form in the stacked randomness `w = Concat(x_0, w_0, ..., w_{t-1})`:
//!
//! ```text
//! loglr_t = L0 + L1^T w + w^T L2 w
//! ```
//!
//! whose coefficient tensors are assembled from the closed-loop transition
//! products. Centering `w` splits the statistic into a linear Gaussian part
//! and a centered quadratic part; a Lipschitz Gaussian tail bounds the
//! former, a Hanson-Wright tail bounds the latter, and the detection event
//! `{loglr_t >= log U}` is covered by a union of the two at any split
//! `eps1 + eps2 = log U - E loglr_t`. The split is optimized since the
//! bound holds for every choice.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::analysis::{expected_loglr, StateMoments};
use crate::detector::SprtConfig;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ProblemSpec;
use crate::solver::SolvedPolicy;

/// Golden-section refinement target, relative to the split budget.
const SPLIT_TOL: f64 = 1e-6;

/// Coupling matrix `S_k = F_k S F_k^T + 2 G_k H_k^-1 E2 S F_k^T` with
/// `S = sigma_y2^-1`; the quadratic weight of the statistic's state term.
pub(crate) fn coupling_matrix(spec: &ProblemSpec, policy: &SolvedPolicy, k: usize) -> DMatrix<f64> {
    let f_k = spec.stacked_pattern(k);
    let s_inv = spec.sigma_y2_inv();
    let e2 = spec.e2();
    let s_ft = s_inv * f_k.transpose();
    &f_k * &s_ft + (&policy.aux.g[k] * &policy.aux.h_inv[k] * &e2 * &s_ft) * 2.0
}

/// The quadratic representation of `loglr_t` in the stacked randomness,
/// together with the mean and covariance of that randomness.
///
/// Block slot `0` is `x_0`; block slot `k+1` is the step-`k` noise.
#[derive(Debug, Clone)]
pub struct LoglrQuadraticForm {
    /// Time index the representation was assembled for.
    pub t: usize,
    /// Constant term.
    pub l0: f64,
    /// Linear term, length `2n(t+1)`.
    pub l1: DVector<f64>,
    /// Quadratic term, `2n(t+1) x 2n(t+1)`.
    pub l2: DMatrix<f64>,
    /// Symmetric part of the quadratic term.
    pub l2s: DMatrix<f64>,
    /// Mean of the stacked randomness: `Concat(x_0, 0, ..., 0)`.
    pub mw: DVector<f64>,
    /// Covariance of the stacked randomness:
    /// `diag(0, sigma_z2, sigma_y2, ..., sigma_z2, sigma_y2)`.
    pub sw: DMatrix<f64>,
}

impl LoglrQuadraticForm {
    /// Evaluates the representation on one realized `w = Concat(x_0, w_0,
    /// ..., w_{t-1})`.
    pub fn evaluate(&self, w: &DVector<f64>) -> Result<f64> {
        if w.len() != self.l1.len() {
            return Err(Error::DimensionMismatch {
                name: "stacked noise vector".into(),
                expected: format!("length {}", self.l1.len()),
                got: format!("length {}", w.len()),
            });
        }
        Ok(self.l0 + self.l1.dot(w) + (&self.l2 * w).dot(w))
    }

    /// Expectation of the quadratic form under the stacked Gaussian:
    /// `L0 + L1^T m + m^T L2s m + tr(L2s Sigma)`.
    pub fn mean(&self) -> f64 {
        self.l0
            + self.l1.dot(&self.mw)
            + (&self.l2s * &self.mw).dot(&self.mw)
            + (&self.l2s * &self.sw).trace()
    }

    /// Stacks one trajectory's randomness in this form's block convention.
    pub fn stack_path(&self, x0: &DVector<f64>, noises: &[DVector<f64>]) -> DVector<f64> {
        let dim = x0.len();
        let mut w = DVector::zeros(dim * (self.t + 1));
        w.rows_mut(0, dim).copy_from(x0);
        for (k, wk) in noises.iter().take(self.t).enumerate() {
            w.rows_mut(dim * (k + 1), dim).copy_from(wk);
        }
        w
    }
}

/// Assembles the coefficient tensors of the quadratic representation at
/// time `t`.
///
/// The transition products `C_{a,b} = K_b^T ... K_a^T` (identity when
/// `b < a`) are built incrementally; `D_{k-1}` accumulates the drift part
/// of the closed-loop state, and the blocks of `L1`/`L2` follow the
/// indicator-guarded sums obtained by expanding the statistic in the
/// stacked randomness. Requires a zero pattern offset.
#[allow(clippy::needless_range_loop)] // block-index arithmetic is the point here
pub fn assemble_tensors(
    spec: &ProblemSpec,
    policy: &SolvedPolicy,
    moments: &StateMoments,
    t: usize,
) -> Result<LoglrQuadraticForm> {
    if t > spec.horizon() {
        return Err(Error::TimeOutOfRange {
            t,
            max: spec.horizon(),
        });
    }
    for (step, fd) in spec.pattern().fd.iter().enumerate() {
        if fd.norm() != 0.0 {
            return Err(Error::NonzeroPatternOffset {
                t: step,
                norm: fd.norm(),
            });
        }
    }

    let dim = spec.state_dim();
    let n = spec.n();
    let stacked = dim * (t + 1);
    let s_inv = spec.sigma_y2_inv();
    let e2 = spec.e2();
    let eye = DMatrix::<f64>::identity(dim, dim);

    // c_table[a] holds C_{a,b} for b = a..t-1; C_{a,b} = K_b^T C_{a,b-1}.
    let mut c_table: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(t);
    for a in 0..t {
        let mut row = Vec::with_capacity(t - a);
        let mut acc = eye.clone();
        for b in a..t {
            acc = moments.k[b].transpose() * acc;
            row.push(acc.clone());
        }
        c_table.push(row);
    }
    let c_prod = |a: usize, b: isize| -> DMatrix<f64> {
        if b < a as isize {
            eye.clone()
        } else {
            c_table[a][b as usize - a].clone()
        }
    };

    // drift[k] = D_{k-1} = -sum_{j<k} C_{j+1,k-1} H_j^-1 s_{j+1}; drift[0] = 0.
    let mut drift = vec![DVector::zeros(dim); t.max(1)];
    for k in 1..t {
        let mut acc = DVector::zeros(dim);
        for j in 0..k {
            acc -= c_prod(j + 1, k as isize - 1) * (&policy.aux.h_inv[j] * &policy.s[j + 1]);
        }
        drift[k] = acc;
    }

    let couplings: Vec<DMatrix<f64>> = (0..t).map(|k| coupling_matrix(spec, policy, k)).collect();
    let couplings_sym: Vec<DMatrix<f64>> = couplings.iter().map(linalg::symmetrize).collect();

    // Constant term.
    let mut l0 = 0.0;
    for k in 0..t {
        let d_k = &drift[k];
        let lin = (&policy.aux.h_inv[k] * &policy.s[k + 1])
            .dot(&(&e2 * (s_inv * (spec.stacked_pattern(k).transpose() * d_k))));
        l0 -= 0.5 * (2.0 * lin + (&couplings[k] * d_k).dot(d_k));
    }

    // Linear term, block slot k+1 for k = -1..=t-1.
    let mut l1 = DVector::zeros(stacked);
    for k in -1..t as isize {
        let slot = (k + 1) as usize;
        let mut block = DVector::zeros(dim);
        if k >= 0 {
            let ku = k as usize;
            block += &e2 * (s_inv * (spec.stacked_pattern(ku).transpose() * &drift[ku]));
        }
        if k <= t as isize - 2 {
            for j in (k + 1) as usize..t {
                let inner = spec.stacked_pattern(j)
                    * (s_inv * (e2.transpose() * (&policy.aux.h_inv[j] * &policy.s[j + 1])))
                    + &couplings_sym[j] * &drift[j];
                block -= c_prod((k + 1) as usize, j as isize - 1).transpose() * inner;
            }
        }
        l1.rows_mut(slot * dim, dim).copy_from(&block);
    }

    // Quadratic term, block (i, j) at slots (i+1, j+1).
    let mut l2 = DMatrix::zeros(stacked, stacked);
    for i in -1..t as isize {
        for j in -1..t as isize {
            let mut block = DMatrix::zeros(dim, dim);
            if i >= 0 && j < i {
                let iu = i as usize;
                // E2 S F_i^T C_{j+1,i-1}, scaled by the leading 1/2 * 2.
                block += &e2
                    * (s_inv
                        * (spec.stacked_pattern(iu).transpose() * c_prod((j + 1) as usize, i - 1)));
            }
            let lead = i.max(j);
            if lead <= t as isize - 2 {
                let mut sum = DMatrix::zeros(dim, dim);
                for k in (lead + 1) as usize..t {
                    sum += c_prod((i + 1) as usize, k as isize - 1).transpose()
                        * couplings[k].transpose()
                        * c_prod((j + 1) as usize, k as isize - 1);
                }
                block -= 0.5 * sum;
            }
            if block.amax() != 0.0 {
                let (si, sj) = (((i + 1) as usize) * dim, ((j + 1) as usize) * dim);
                l2.view_mut((si, sj), (dim, dim)).copy_from(&block);
            }
        }
    }
    let l2s = linalg::symmetrize(&l2);

    // Stacked mean and covariance: slot 0 is the deterministic x_0.
    let mut mw = DVector::zeros(stacked);
    mw.rows_mut(0, dim).copy_from(&moments.mean[0]);
    let mut sw = DMatrix::zeros(stacked, stacked);
    for slot in 1..=t {
        let base = slot * dim;
        sw.view_mut((base, base), (n, n)).copy_from(spec.sigma_z2());
        sw.view_mut((base + n, base + n), (n, n))
            .copy_from(spec.sigma_y2());
    }

    Ok(LoglrQuadraticForm {
        t,
        l0,
        l1,
        l2,
        l2s,
        mw,
        sw,
    })
}

/// Hanson-Wright tail for a Gaussian quadratic form: with
/// `B = Sigma^(1/2) A Sigma^(1/2)`,
///
/// ```text
/// P(X^T A X - E >= t) <= exp(-min(t^2 / ||B||_F^2, t / ||B||_2) / 8)
/// ```
///
/// `Sigma` may be singular (the PSD square root is used directly, which is
/// the limit of the nondegenerate case).
pub fn hanson_wright_tail(a: &DMatrix<f64>, sigma: &DMatrix<f64>, tail_point: f64) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "quadratic-form matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if sigma.nrows() != a.nrows() || sigma.ncols() != a.ncols() {
        return Err(Error::InvalidArgument(
            "covariance shape must match the form matrix".into(),
        ));
    }
    if tail_point <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tail point must be positive, got {tail_point}"
        )));
    }
    let root = linalg::psd_sqrt(sigma, 1e-10)?;
    let b = &root * a * &root;
    let frob2 = b.norm_squared();
    if frob2 == 0.0 {
        // The form is almost surely constant: no tail mass above t > 0.
        return Ok(0.0);
    }
    let two = linalg::spectral_norm(&b);
    Ok(hw_tail_from_norms(frob2, two, tail_point))
}

fn hw_tail_from_norms(frob2: f64, two_norm: f64, t: f64) -> f64 {
    if frob2 == 0.0 {
        return 0.0;
    }
    (-0.125 * (t * t / frob2).min(t / two_norm)).exp()
}

/// Gaussian tail of a linear form with the given direction norm:
/// `exp(-eps^2 / (2 norm^2))`, and 0 for a degenerate direction.
pub fn gaussian_linear_tail(direction_norm: f64, eps: f64) -> Result<f64> {
    if direction_norm < 0.0 || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "need direction_norm >= 0 and eps > 0, got {direction_norm} and {eps}"
        )));
    }
    if direction_norm == 0.0 {
        return Ok(0.0);
    }
    Ok((-eps * eps / (2.0 * direction_norm * direction_norm)).exp())
}

/// One row of the analytical-bound report.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundRow {
    pub lambda: f64,
    pub t: usize,
    /// Closed-form `E loglr_t`.
    pub e_loglr: f64,
    /// Budget `log U - E loglr_t`.
    pub delta: f64,
    /// Optimized split of the budget between the linear and quadratic tails.
    pub eps1: f64,
    pub eps2: f64,
    pub linear_tail: f64,
    pub quadratic_tail: f64,
    /// `min(1, linear_tail + quadratic_tail)`; 1 whenever `delta <= 0`.
    pub bound: f64,
}

/// Table of bound rows over `(lambda, t)`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    /// CSV rows `lambda, t, E_loglr, delta, eps1, eps2, bound` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,t,E_loglr,delta,eps1,eps2,bound\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.lambda, r.t, r.e_loglr, r.delta, r.eps1, r.eps2, r.bound
            ));
        }
        out
    }
}

/// Minimizes `linear_tail(eps1) + quad_tail(delta - eps1)` over the split.
///
/// The objective is a sum of two smooth monotone-opposed terms; a coarse
/// scan brackets the minimum and golden-section search refines it to
/// `1e-6 * delta`.
pub(crate) fn optimize_split(
    direction_norm: f64,
    quad_frob2: f64,
    quad_two_norm: f64,
    delta: f64,
) -> (f64, f64, f64, f64, f64) {
    debug_assert!(delta > 0.0);
    if direction_norm == 0.0 && quad_frob2 == 0.0 {
        return (0.5 * delta, 0.5 * delta, 0.0, 0.0, 0.0);
    }
    let objective = |eps1: f64| -> f64 {
        let lin = if direction_norm == 0.0 {
            0.0
        } else {
            (-eps1 * eps1 / (2.0 * direction_norm * direction_norm)).exp()
        };
        lin + hw_tail_from_norms(quad_frob2, quad_two_norm, delta - eps1)
    };

    // Coarse scan over the open interval.
    let scan = 128usize;
    let mut best_i = 1usize;
    let mut best_val = f64::INFINITY;
    for i in 1..scan {
        let eps1 = delta * i as f64 / scan as f64;
        let val = objective(eps1);
        if val < best_val {
            best_val = val;
            best_i = i;
        }
    }
    let mut lo = delta * best_i.saturating_sub(1) as f64 / scan as f64;
    let mut hi = delta * (best_i + 1).min(scan) as f64 / scan as f64;
    lo = lo.max(delta * 1e-9);
    hi = hi.min(delta * (1.0 - 1e-9));

    // Golden-section refinement.
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while hi - lo > SPLIT_TOL * delta {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    let eps1 = 0.5 * (lo + hi);
    let eps2 = delta - eps1;
    let lin = if direction_norm == 0.0 {
        0.0
    } else {
        (-eps1 * eps1 / (2.0 * direction_norm * direction_norm)).exp()
    };
    let quad = hw_tail_from_norms(quad_frob2, quad_two_norm, eps2);
    (eps1, eps2, lin, quad, (lin + quad).min(1.0))
}

/// Evaluates the analytical detection-probability bound at time `t`.
///
/// When the budget `delta = log U - E loglr_t` is nonpositive the bound is
/// the trivial 1; otherwise the split between the linear and quadratic
/// tails is optimized and the sum clamped to [0, 1].
pub fn detection_bound(
    spec: &ProblemSpec,
    policy: &SolvedPolicy,
    moments: &StateMoments,
    config: &SprtConfig,
    t: usize,
) -> Result<BoundRow> {
    let e_loglr = expected_loglr(spec, policy, moments, t)?;
    let delta = config.log_upper() - e_loglr;
    if delta <= 0.0 {
        return Ok(BoundRow {
            lambda: spec.lambda(),
            t,
            e_loglr,
            delta,
            eps1: 0.0,
            eps2: 0.0,
            linear_tail: 1.0,
            quadratic_tail: 1.0,
            bound: 1.0,
        });
    }

    let form = assemble_tensors(spec, policy, moments, t)?;
    let n = spec.n();
    let dim = spec.state_dim();

    // Block-diagonal PSD square root of the stacked covariance.
    let sz_root = linalg::psd_sqrt(spec.sigma_z2(), 1e-12)?;
    let sy_root = linalg::psd_sqrt(spec.sigma_y2(), 1e-12)?;
    let stacked = dim * (t + 1);
    let mut sw_root = DMatrix::zeros(stacked, stacked);
    for slot in 1..=t {
        let base = slot * dim;
        sw_root.view_mut((base, base), (n, n)).copy_from(&sz_root);
        sw_root
            .view_mut((base + n, base + n), (n, n))
            .copy_from(&sy_root);
    }

    let direction = &form.l1 + (&form.l2s * &form.mw) * 2.0;
    let direction_norm = (&sw_root * direction).norm();
    let sandwiched = &sw_root * &form.l2s * &sw_root;
    let quad_frob2 = sandwiched.norm_squared();
    let quad_two_norm = linalg::spectral_norm(&sandwiched);

    let (eps1, eps2, linear_tail, quadratic_tail, bound) =
        optimize_split(direction_norm, quad_frob2, quad_two_norm, delta);

    Ok(BoundRow {
        lambda: spec.lambda(),
        t,
        e_loglr,
        delta,
        eps1,
        eps2,
        linear_tail,
        quadratic_tail,
        bound,
    })
}
