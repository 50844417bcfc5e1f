//! Problem data for the deceptive linear-quadratic control model.
//!
//! The controlled state is `x_t = Concat(v_t, p_t)` with block dynamics
//!
//! ```text
//! v_{t+1} = v_t + alpha_t + Z_t,      Z_t ~ N(0, sigma_z2)
//! p_{t+1} = p_t + v_t + beta_t + Y_t, Y_t ~ N(0, sigma_y2)
//! ```
//!
//! i.e. `x_{t+1} = A x_t + B u_t + w_t` with `A = [[I, 0], [I, I]]` and
//! `B = I`. The primary task tracks a reference `vbar_t` with quadratic
//! penalties on the state error and both control channels; the `beta`
//! channel is additionally steered toward a fixed deceptive feedback law
//! `Fb_t v + Fc_t p + fd_t` with intensity `lambda`, which turns the running
//! cost into the augmented quadratic form assembled by
//! [`stage_coefficients`].

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg;

/// The fixed deceptive feedback law `beta_t = Fb_t v_t + Fc_t p_t + fd_t`
/// that defines the alternative hypothesis of the observer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeceptionPattern {
    /// Velocity feedback `Fb_t`, one `n x n` matrix per step `t = 0..T-1`.
    pub fb: Vec<DMatrix<f64>>,
    /// Position feedback `Fc_t`, one `n x n` matrix per step.
    pub fc: Vec<DMatrix<f64>>,
    /// Offset `fd_t`, one length-`n` vector per step.
    pub fd: Vec<DVector<f64>>,
}

impl DeceptionPattern {
    /// Constant pattern broadcast over `horizon` steps.
    pub fn constant(fb: DMatrix<f64>, fc: DMatrix<f64>, fd: DVector<f64>, horizon: usize) -> Self {
        Self {
            fb: vec![fb; horizon],
            fc: vec![fc; horizon],
            fd: vec![fd; horizon],
        }
    }

    /// True when every offset `fd_t` is exactly zero.
    pub fn has_zero_offset(&self) -> bool {
        self.fd.iter().all(|f| f.iter().all(|&x| x == 0.0))
    }
}

/// A fully validated instance of the deception model.
///
/// Construct through [`ProblemSpec::new`] (or the JSON loaders), which
/// checks every invariant and caches the factorizations used downstream.
/// Instances are immutable afterwards and safe to share across workers.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    n: usize,
    horizon: usize,
    sigma_z2: DMatrix<f64>,
    sigma_y2: DMatrix<f64>,
    x0: DVector<f64>,
    r_alpha: DMatrix<f64>,
    r_beta: DMatrix<f64>,
    r_v: DMatrix<f64>,
    t_v: DMatrix<f64>,
    vbar: Vec<DVector<f64>>,
    pattern: DeceptionPattern,
    lambda: f64,
    // Cached at validation time.
    sigma_y2_inv: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    noise_factor_z: DMatrix<f64>,
    noise_factor_y: DMatrix<f64>,
}

impl ProblemSpec {
    /// Validates all invariants and builds the cached factorizations.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        horizon: usize,
        sigma_z2: DMatrix<f64>,
        sigma_y2: DMatrix<f64>,
        x0: DVector<f64>,
        r_alpha: DMatrix<f64>,
        r_beta: DMatrix<f64>,
        r_v: DMatrix<f64>,
        t_v: DMatrix<f64>,
        vbar: Vec<DVector<f64>>,
        pattern: DeceptionPattern,
        lambda: f64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::DimensionMismatch {
                name: "n".into(),
                expected: "a positive integer".into(),
                got: "0".into(),
            });
        }
        if horizon == 0 {
            return Err(Error::DimensionMismatch {
                name: "T".into(),
                expected: "a positive integer".into(),
                got: "0".into(),
            });
        }
        linalg::check_spd(&sigma_z2, n, "sigma_z2")?;
        linalg::check_spd(&sigma_y2, n, "sigma_y2")?;
        linalg::check_spd(&r_alpha, n, "R_alpha")?;
        linalg::check_spd(&r_beta, n, "R_beta")?;
        linalg::check_spd(&r_v, n, "R_v")?;
        linalg::check_spd(&t_v, n, "T_v")?;
        if x0.len() != 2 * n {
            return Err(Error::DimensionMismatch {
                name: "x0".into(),
                expected: format!("length {}", 2 * n),
                got: format!("length {}", x0.len()),
            });
        }
        if vbar.len() != horizon + 1 {
            return Err(Error::DimensionMismatch {
                name: "vbar".into(),
                expected: format!("length T+1 = {}", horizon + 1),
                got: format!("length {}", vbar.len()),
            });
        }
        for (t, v) in vbar.iter().enumerate() {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    name: format!("vbar[{t}]"),
                    expected: format!("length {n}"),
                    got: format!("length {}", v.len()),
                });
            }
        }
        for (name, len) in [
            ("pattern.Fb", pattern.fb.len()),
            ("pattern.Fc", pattern.fc.len()),
            ("pattern.fd", pattern.fd.len()),
        ] {
            if len != horizon {
                return Err(Error::DimensionMismatch {
                    name: name.into(),
                    expected: format!("length T = {horizon}"),
                    got: format!("length {len}"),
                });
            }
        }
        for t in 0..horizon {
            for (name, m) in [("Fb", &pattern.fb[t]), ("Fc", &pattern.fc[t])] {
                if m.nrows() != n || m.ncols() != n {
                    return Err(Error::DimensionMismatch {
                        name: format!("pattern.{name}[{t}]"),
                        expected: format!("{n}x{n}"),
                        got: format!("{}x{}", m.nrows(), m.ncols()),
                    });
                }
            }
            if pattern.fd[t].len() != n {
                return Err(Error::DimensionMismatch {
                    name: format!("pattern.fd[{t}]"),
                    expected: format!("length {n}"),
                    got: format!("length {}", pattern.fd[t].len()),
                });
            }
        }
        if lambda < 0.0 {
            return Err(Error::NegativeIntensity(lambda));
        }

        let sigma_y2_inv = nalgebra::Cholesky::new(linalg::symmetrize(&sigma_y2))
            .expect("sigma_y2 checked positive definite")
            .inverse();
        let mut r_inv = DMatrix::zeros(2 * n, 2 * n);
        r_inv.view_mut((0, 0), (n, n)).copy_from(
            &nalgebra::Cholesky::new(linalg::symmetrize(&r_alpha))
                .expect("R_alpha checked positive definite")
                .inverse(),
        );
        r_inv.view_mut((n, n), (n, n)).copy_from(
            &nalgebra::Cholesky::new(linalg::symmetrize(&r_beta))
                .expect("R_beta checked positive definite")
                .inverse(),
        );
        let noise_factor_z = nalgebra::Cholesky::new(linalg::symmetrize(&sigma_z2))
            .expect("sigma_z2 checked positive definite")
            .l();
        let noise_factor_y = nalgebra::Cholesky::new(linalg::symmetrize(&sigma_y2))
            .expect("sigma_y2 checked positive definite")
            .l();

        Ok(Self {
            n,
            horizon,
            sigma_z2,
            sigma_y2,
            x0,
            r_alpha,
            r_beta,
            r_v,
            t_v,
            vbar,
            pattern,
            lambda,
            sigma_y2_inv,
            r_inv,
            noise_factor_z,
            noise_factor_y,
        })
    }

    /// Convenience constructor for scalar (`n = 1`) instances with a
    /// constant deception pattern.
    #[allow(clippy::too_many_arguments)]
    pub fn onedim(
        horizon: usize,
        sigma_z2: f64,
        sigma_y2: f64,
        v0: f64,
        p0: f64,
        r_alpha: f64,
        r_beta: f64,
        r_v: f64,
        t_v: f64,
        vbar: Vec<f64>,
        fb: f64,
        fc: f64,
        fd: f64,
        lambda: f64,
    ) -> Result<Self> {
        let scalar = |x: f64| DMatrix::from_element(1, 1, x);
        Self::new(
            1,
            horizon,
            scalar(sigma_z2),
            scalar(sigma_y2),
            DVector::from_vec(vec![v0, p0]),
            scalar(r_alpha),
            scalar(r_beta),
            scalar(r_v),
            scalar(t_v),
            vbar.into_iter()
                .map(|v| DVector::from_element(1, v))
                .collect(),
            DeceptionPattern::constant(
                scalar(fb),
                scalar(fc),
                DVector::from_element(1, fd),
                horizon,
            ),
            lambda,
        )
    }

    /// Same problem with a different deception intensity; the cached
    /// factorizations do not depend on `lambda` and are reused.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::NegativeIntensity(lambda));
        }
        let mut out = self.clone();
        out.lambda = lambda;
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// State dimension `2n`.
    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    /// Horizon `T`; time runs over `0..=T`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn sigma_z2(&self) -> &DMatrix<f64> {
        &self.sigma_z2
    }

    pub fn sigma_y2(&self) -> &DMatrix<f64> {
        &self.sigma_y2
    }

    pub fn sigma_y2_inv(&self) -> &DMatrix<f64> {
        &self.sigma_y2_inv
    }

    pub fn r_alpha(&self) -> &DMatrix<f64> {
        &self.r_alpha
    }

    pub fn r_beta(&self) -> &DMatrix<f64> {
        &self.r_beta
    }

    pub fn r_v(&self) -> &DMatrix<f64> {
        &self.r_v
    }

    pub fn t_v(&self) -> &DMatrix<f64> {
        &self.t_v
    }

    /// Cached inverse of the block-diagonal control weight `diag(R_alpha, R_beta)`.
    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn vbar(&self, t: usize) -> &DVector<f64> {
        &self.vbar[t]
    }

    pub fn pattern(&self) -> &DeceptionPattern {
        &self.pattern
    }

    /// Lower Cholesky factor of `sigma_z2`, for noise sampling.
    pub fn noise_factor_z(&self) -> &DMatrix<f64> {
        &self.noise_factor_z
    }

    /// Lower Cholesky factor of `sigma_y2`, for noise sampling.
    pub fn noise_factor_y(&self) -> &DMatrix<f64> {
        &self.noise_factor_y
    }

    /// Block `2n x 2n` drift matrix `[[I, 0], [I, I]]`.
    pub fn a_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        let eye = DMatrix::<f64>::identity(n, n);
        a.view_mut((0, 0), (n, n)).copy_from(&eye);
        a.view_mut((n, 0), (n, n)).copy_from(&eye);
        a.view_mut((n, n), (n, n)).copy_from(&eye);
        a
    }

    /// Control matrix `B = I_{2n}`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(2 * self.n, 2 * self.n)
    }

    /// Process-noise covariance `diag(sigma_z2, sigma_y2)`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut s = DMatrix::zeros(2 * n, 2 * n);
        s.view_mut((0, 0), (n, n)).copy_from(&self.sigma_z2);
        s.view_mut((n, n), (n, n)).copy_from(&self.sigma_y2);
        s
    }

    /// The deceptive target `Fb_t v + Fc_t p + fd_t` at state `x`.
    pub fn deception_target(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let v = x.rows(0, n);
        let p = x.rows(n, n);
        &self.pattern.fb[t] * v + &self.pattern.fc[t] * p + &self.pattern.fd[t]
    }

    /// Stacked pattern matrix `F_t = [Fb_t  Fc_t]^T` of size `2n x n`.
    pub fn stacked_pattern(&self, t: usize) -> DMatrix<f64> {
        let n = self.n;
        let mut f = DMatrix::zeros(2 * n, n);
        f.view_mut((0, 0), (n, n))
            .copy_from(&self.pattern.fb[t].transpose());
        f.view_mut((n, 0), (n, n))
            .copy_from(&self.pattern.fc[t].transpose());
        f
    }

    /// Selector `E2 = [0  I]^T` mapping the position-noise block into the
    /// state, of size `2n x n`.
    pub fn e2(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut e = DMatrix::zeros(2 * n, n);
        e.view_mut((n, 0), (n, n))
            .copy_from(&DMatrix::identity(n, n));
        e
    }
}

/// Coefficients of the augmented running cost
/// `h_t(x, u) = x^T Q x / 2 + u^T R u / 2 + x^T N u + q^T x + r^T u + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCoefficients {
    /// State quadratic term `Q_t` (symmetric `2n x 2n`).
    pub q: DMatrix<f64>,
    /// Control quadratic term `R = diag(R_alpha, R_beta)`.
    pub r: DMatrix<f64>,
    /// State-control cross term `N_t`.
    pub n: DMatrix<f64>,
    /// State linear term `q_t`.
    pub q_lin: DVector<f64>,
    /// Control linear term `r_t`.
    pub r_lin: DVector<f64>,
    /// Constant term `d_t`.
    pub d: f64,
}

/// Assembles the augmented stage-cost coefficients at step `t`.
///
/// With `S = sigma_y2^-1`, the deception part of the running cost expands to
///
/// ```text
/// Q_t = [[R_v + l Fb^T S Fb,  l Fb^T S Fc], [l Fc^T S Fb,  l Fc^T S Fc]]
/// N_t = [[0, -l Fb^T S], [0, -l Fc^T S]]
/// q_t = (-R_v vbar_t + l Fb^T S fd,  l Fc^T S fd)
/// r_t = (0,  -l S fd)
/// d_t = vbar_t^T R_v vbar_t / 2 + l fd^T S fd / 2
/// ```
///
/// `Q_t` is symmetrized after assembly to remove roundoff drift.
pub fn stage_coefficients(spec: &ProblemSpec, t: usize) -> Result<StageCoefficients> {
    if t >= spec.horizon() {
        return Err(Error::TimeOutOfRange {
            t,
            max: spec.horizon() - 1,
        });
    }
    let n = spec.n();
    let l = spec.lambda();
    let s_inv = spec.sigma_y2_inv();
    let fb = &spec.pattern().fb[t];
    let fc = &spec.pattern().fc[t];
    let fd = &spec.pattern().fd[t];
    let vbar = spec.vbar(t);

    let fb_s = fb.transpose() * s_inv;
    let fc_s = fc.transpose() * s_inv;

    let mut q = DMatrix::zeros(2 * n, 2 * n);
    q.view_mut((0, 0), (n, n))
        .copy_from(&(spec.r_v() + &fb_s * fb * l));
    q.view_mut((0, n), (n, n)).copy_from(&(&fb_s * fc * l));
    q.view_mut((n, 0), (n, n)).copy_from(&(&fc_s * fb * l));
    q.view_mut((n, n), (n, n)).copy_from(&(&fc_s * fc * l));
    let q = linalg::symmetrize(&q);

    let mut r = DMatrix::zeros(2 * n, 2 * n);
    r.view_mut((0, 0), (n, n)).copy_from(spec.r_alpha());
    r.view_mut((n, n), (n, n)).copy_from(spec.r_beta());

    let mut n_mat = DMatrix::zeros(2 * n, 2 * n);
    n_mat.view_mut((0, n), (n, n)).copy_from(&(&fb_s * -l));
    n_mat.view_mut((n, n), (n, n)).copy_from(&(&fc_s * -l));

    let mut q_lin = DVector::zeros(2 * n);
    q_lin
        .rows_mut(0, n)
        .copy_from(&(-(spec.r_v() * vbar) + &fb_s * fd * l));
    q_lin.rows_mut(n, n).copy_from(&(&fc_s * fd * l));

    let mut r_lin = DVector::zeros(2 * n);
    r_lin.rows_mut(n, n).copy_from(&(s_inv * fd * -l));

    let d = 0.5 * (spec.r_v() * vbar).dot(vbar) + 0.5 * l * (s_inv * fd).dot(fd);

    Ok(StageCoefficients {
        q,
        r,
        n: n_mat,
        q_lin,
        r_lin,
        d,
    })
}

// ---------------------------------------------------------------------------
// JSON problem files
// ---------------------------------------------------------------------------

fn as_f64(v: &Value, name: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Parse(format!("{name}: expected a number, got {v}")))
}

fn as_usize(v: &Value, name: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Parse(format!("{name}: expected a nonnegative integer, got {v}")))
}

/// Parses a single `n x n` matrix: a bare number is accepted when `n = 1`,
/// otherwise a row-major nested array.
fn parse_matrix(v: &Value, n: usize, name: &str) -> Result<DMatrix<f64>> {
    if let Some(x) = v.as_f64() {
        if n == 1 {
            return Ok(DMatrix::from_element(1, 1, x));
        }
        return Err(Error::Parse(format!(
            "{name}: scalar given but n = {n}; expected an {n}x{n} nested array"
        )));
    }
    let rows = v
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{name}: expected a matrix (nested array)")))?;
    if rows.len() != n {
        return Err(Error::Parse(format!(
            "{name}: expected {n} rows, got {}",
            rows.len()
        )));
    }
    let mut out = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        let cols = row
            .as_array()
            .ok_or_else(|| Error::Parse(format!("{name}: row {i} is not an array")))?;
        if cols.len() != n {
            return Err(Error::Parse(format!(
                "{name}: row {i} has {} entries, expected {n}",
                cols.len()
            )));
        }
        for (j, x) in cols.iter().enumerate() {
            out[(i, j)] = as_f64(x, &format!("{name}[{i}][{j}]"))?;
        }
    }
    Ok(out)
}

/// Parses a length-`len` vector: a bare number is accepted when `len = 1`.
fn parse_vector(v: &Value, len: usize, name: &str) -> Result<DVector<f64>> {
    if let Some(x) = v.as_f64() {
        if len == 1 {
            return Ok(DVector::from_element(1, x));
        }
        return Err(Error::Parse(format!(
            "{name}: scalar given but expected a length-{len} array"
        )));
    }
    let items = v
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{name}: expected an array")))?;
    if items.len() != len {
        return Err(Error::Parse(format!(
            "{name}: expected length {len}, got {}",
            items.len()
        )));
    }
    let mut out = DVector::zeros(len);
    for (i, x) in items.iter().enumerate() {
        out[i] = as_f64(x, &format!("{name}[{i}]"))?;
    }
    Ok(out)
}

/// Parses a sequence of matrices of required length `len`, broadcasting a
/// single constant entry (`Fb: 0.5` or `Fb: [[..]]`) over the whole horizon.
fn parse_matrix_seq(v: &Value, n: usize, len: usize, name: &str) -> Result<Vec<DMatrix<f64>>> {
    // A single matrix parses directly; otherwise treat as a list.
    if let Ok(single) = parse_matrix(v, n, name) {
        return Ok(vec![single; len]);
    }
    let items = v
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{name}: expected a matrix or a list of matrices")))?;
    if items.len() != len {
        return Err(Error::Parse(format!(
            "{name}: expected a single matrix or a list of length T = {len}, got length {}",
            items.len()
        )));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| parse_matrix(item, n, &format!("{name}[{i}]")))
        .collect()
}

/// Parses a sequence of vectors of required length `len`, broadcasting a
/// single constant entry over the whole sequence.
fn parse_vector_seq(v: &Value, n: usize, len: usize, name: &str) -> Result<Vec<DVector<f64>>> {
    if let Some(x) = v.as_f64() {
        if n != 1 {
            return Err(Error::Parse(format!(
                "{name}: scalar given but n = {n}; expected length-{n} vectors"
            )));
        }
        return Ok(vec![DVector::from_element(1, x); len]);
    }
    let items = v
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{name}: expected a vector or a list of vectors")))?;
    // For n = 1, a flat list of numbers is the per-step sequence.
    if n == 1 && items.iter().all(Value::is_number) {
        if items.len() != len {
            return Err(Error::Parse(format!(
                "{name}: length must be {len}, got {}",
                items.len()
            )));
        }
        return items
            .iter()
            .enumerate()
            .map(|(i, x)| as_f64(x, &format!("{name}[{i}]")).map(|v| DVector::from_element(1, v)))
            .collect();
    }
    // For n > 1, a flat list of n numbers is one vector, broadcast.
    if items.iter().all(Value::is_number) && items.len() == n {
        let single = parse_vector(v, n, name)?;
        return Ok(vec![single; len]);
    }
    if items.len() != len {
        return Err(Error::Parse(format!(
            "{name}: expected a single vector or a list of length {len}, got length {}",
            items.len()
        )));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| parse_vector(item, n, &format!("{name}[{i}]")))
        .collect()
}

fn get<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::Parse(format!("missing field `{key}`")))
}

/// Builds a validated [`ProblemSpec`] from a parsed JSON value.
///
/// Matrices are row-major nested arrays (bare numbers for `n = 1`);
/// per-step sequences accept either a full list (`T` entries, `T+1` for
/// `vbar`) or a single constant entry that is broadcast.
pub fn problem_from_value(v: &Value) -> Result<ProblemSpec> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Parse("problem file must be a JSON object".into()))?;
    let n = as_usize(get(obj, "n")?, "n")?;
    let horizon = as_usize(get(obj, "T")?, "T")?;
    if n == 0 || horizon == 0 {
        return Err(Error::Parse("n and T must be positive".into()));
    }
    let pattern_obj = get(obj, "pattern")?
        .as_object()
        .ok_or_else(|| Error::Parse("pattern: expected an object with Fb, Fc, fd".into()))?;
    let pattern = DeceptionPattern {
        fb: parse_matrix_seq(get(pattern_obj, "Fb")?, n, horizon, "pattern.Fb")?,
        fc: parse_matrix_seq(get(pattern_obj, "Fc")?, n, horizon, "pattern.Fc")?,
        fd: parse_vector_seq(get(pattern_obj, "fd")?, n, horizon, "pattern.fd")?,
    };
    ProblemSpec::new(
        n,
        horizon,
        parse_matrix(get(obj, "sigma_z2")?, n, "sigma_z2")?,
        parse_matrix(get(obj, "sigma_y2")?, n, "sigma_y2")?,
        parse_vector(get(obj, "x0")?, 2 * n, "x0")?,
        parse_matrix(get(obj, "R_alpha")?, n, "R_alpha")?,
        parse_matrix(get(obj, "R_beta")?, n, "R_beta")?,
        parse_matrix(get(obj, "R_v")?, n, "R_v")?,
        parse_matrix(get(obj, "T_v")?, n, "T_v")?,
        parse_vector_seq(get(obj, "vbar")?, n, horizon + 1, "vbar")?,
        pattern,
        as_f64(get(obj, "lambda")?, "lambda")?,
    )
}

/// Parses a problem file from JSON text.
pub fn problem_from_json_str(text: &str) -> Result<ProblemSpec> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    problem_from_value(&value)
}

/// Fully explicit JSON form of a spec: every sequence materialized, no
/// broadcast shorthand. Used to echo resolved configurations.
pub fn problem_to_value(spec: &ProblemSpec) -> Value {
    let mat = |m: &DMatrix<f64>| json!(linalg::matrix_rows(m));
    let vecj = |v: &DVector<f64>| json!(v.iter().cloned().collect::<Vec<f64>>());
    json!({
        "n": spec.n(),
        "T": spec.horizon(),
        "sigma_z2": mat(spec.sigma_z2()),
        "sigma_y2": mat(spec.sigma_y2()),
        "x0": vecj(spec.x0()),
        "R_alpha": mat(spec.r_alpha()),
        "R_beta": mat(spec.r_beta()),
        "R_v": mat(spec.r_v()),
        "T_v": mat(spec.t_v()),
        "vbar": (0..=spec.horizon()).map(|t| vecj(spec.vbar(t))).collect::<Vec<_>>(),
        "pattern": {
            "Fb": spec.pattern().fb.iter().map(mat).collect::<Vec<_>>(),
            "Fc": spec.pattern().fc.iter().map(mat).collect::<Vec<_>>(),
            "fd": spec.pattern().fd.iter().map(vecj).collect::<Vec<_>>(),
        },
        "lambda": spec.lambda(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::demo_spec;
    use approx::assert_relative_eq;

    #[test]
    fn demo_parameters_validate() {
        let spec = demo_spec(0.0);
        assert_eq!(spec.n(), 1);
        assert_eq!(spec.horizon(), 20);
        assert_eq!(spec.vbar(20)[0], 0.0);
    }

    #[test]
    fn zero_weight_rejected() {
        let err = ProblemSpec::onedim(
            20,
            0.05,
            0.05,
            1.0,
            4.0,
            1.0,
            0.0, // R_beta = 0 is not positive definite
            1.0,
            1.0,
            vec![0.0; 21],
            0.5,
            -0.1,
            0.0,
            0.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn vbar_length_must_be_horizon_plus_one() {
        let err = ProblemSpec::onedim(
            20,
            0.05,
            0.05,
            1.0,
            4.0,
            1.0,
            10.0,
            1.0,
            1.0,
            vec![0.0; 20],
            0.5,
            -0.1,
            0.0,
            0.0,
        )
        .unwrap_err();
        match err {
            Error::DimensionMismatch { name, expected, .. } => {
                assert_eq!(name, "vbar");
                assert!(expected.contains("21"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let err = demo_spec(0.0).with_lambda(-1.0).unwrap_err();
        assert!(matches!(err, Error::NegativeIntensity(_)));
    }

    #[test]
    fn coefficients_at_zero_intensity() {
        let spec = demo_spec(0.0);
        let co = stage_coefficients(&spec, 3).unwrap();
        assert_relative_eq!(co.q, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(co.n, DMatrix::zeros(2, 2));
        assert_eq!(co.r_lin, DVector::zeros(2));
        let vbar3 = 1.0 - 3.0 / 20.0;
        assert_relative_eq!(co.q_lin[0], -vbar3);
        assert_eq!(co.q_lin[1], 0.0);
        assert_relative_eq!(co.d, 0.5 * vbar3 * vbar3);
    }

    #[test]
    fn coefficients_at_half_intensity() {
        // Hand evaluation with lambda (Fb)^2 / sigma_y2 = 0.5 * 0.25 * 20 = 2.5, etc.
        let spec = demo_spec(0.5);
        let co = stage_coefficients(&spec, 0).unwrap();
        assert_relative_eq!(
            co.q,
            DMatrix::from_row_slice(2, 2, &[3.5, -0.5, -0.5, 0.1]),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            co.n,
            DMatrix::from_row_slice(2, 2, &[0.0, -5.0, 0.0, 1.0]),
            epsilon = 1e-12
        );
        assert_relative_eq!(co.r, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 10.0]));
    }

    #[test]
    fn coefficients_with_offset_pattern() {
        // r_t = (0, -lambda * fd / sigma_y2) = (0, -0.5 * 20 * 0.2) = (0, -2).
        let horizon = 20usize;
        let vbar = (0..=horizon)
            .map(|t| 1.0 - t as f64 / horizon as f64)
            .collect();
        let spec = ProblemSpec::onedim(
            horizon, 0.05, 0.05, 1.0, 4.0, 1.0, 10.0, 1.0, 1.0, vbar, 0.5, -0.1, 0.2, 0.5,
        )
        .unwrap();
        let co = stage_coefficients(&spec, 5).unwrap();
        assert_relative_eq!(co.r_lin[0], 0.0);
        assert_relative_eq!(co.r_lin[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn schur_difference_matches_direct_form() {
        // Q - N R^-1 N^T = diag(R_v, 0) + Fbar^T W Fbar with
        // W = l * S^(1/2) (I - l S^(1/2) R_beta^-1 S^(1/2)) S^(1/2), S = sigma_y2^-1.
        for &lambda in &[0.0, 0.1, 0.3, 0.5] {
            let spec = demo_spec(lambda);
            let co = stage_coefficients(&spec, 7).unwrap();
            let diff = &co.q - &co.n * spec.r_inv() * co.n.transpose();
            let s = spec.sigma_y2_inv()[(0, 0)];
            let w = lambda * s * (1.0 - lambda * s / spec.r_beta()[(0, 0)]);
            let fbar = DMatrix::from_row_slice(1, 2, &[0.5, -0.1]);
            let expected =
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]) + fbar.transpose() * w * fbar;
            assert_relative_eq!(diff, expected, epsilon = 1e-10);
            // PSD whenever the well-posedness condition holds (lambda <= 0.5 here).
            assert!(crate::linalg::min_symmetric_eigenvalue(&diff) >= -1e-9);
        }
    }

    #[test]
    fn coefficients_are_deterministic() {
        let spec = demo_spec(0.3);
        let a = stage_coefficients(&spec, 11).unwrap();
        let b = stage_coefficients(&spec, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_constant_nonnegative() {
        let horizon = 20usize;
        let vbar = (0..=horizon)
            .map(|t| 1.0 - t as f64 / horizon as f64)
            .collect();
        let spec = ProblemSpec::onedim(
            horizon, 0.05, 0.05, 1.0, 4.0, 1.0, 10.0, 1.0, 1.0, vbar, 0.5, -0.1, -0.7, 0.4,
        )
        .unwrap();
        for t in 0..horizon {
            assert!(stage_coefficients(&spec, t).unwrap().d >= 0.0);
        }
    }

    #[test]
    fn stage_time_out_of_range() {
        let spec = demo_spec(0.0);
        assert!(matches!(
            stage_coefficients(&spec, 20),
            Err(Error::TimeOutOfRange { t: 20, max: 19 })
        ));
    }

    #[test]
    fn json_roundtrip_with_broadcast() {
        let text = r#"{
            "n": 1, "T": 20,
            "sigma_z2": 0.05, "sigma_y2": 0.05,
            "x0": [1.0, 4.0],
            "R_alpha": 1.0, "R_beta": 10.0, "R_v": 1.0, "T_v": 1.0,
            "vbar": [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55,
                     0.5, 0.45, 0.4, 0.35, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05, 0.0],
            "pattern": { "Fb": 0.5, "Fc": -0.1, "fd": 0.0 },
            "lambda": 0.04
        }"#;
        let spec = problem_from_json_str(text).unwrap();
        assert_eq!(spec.horizon(), 20);
        assert_eq!(spec.pattern().fb.len(), 20);
        assert_eq!(spec.pattern().fb[7][(0, 0)], 0.5);
        // Round-trip through the explicit form.
        let value = problem_to_value(&spec);
        let back = problem_from_value(&value).unwrap();
        assert_eq!(back.lambda(), 0.04);
        assert_eq!(back.vbar(10)[0], 0.5);
    }

    #[test]
    fn json_short_vbar_rejected() {
        let text = r#"{
            "n": 1, "T": 20,
            "sigma_z2": 0.05, "sigma_y2": 0.05,
            "x0": [1.0, 4.0],
            "R_alpha": 1.0, "R_beta": 10.0, "R_v": 1.0, "T_v": 1.0,
            "vbar": [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55,
                     0.5, 0.45, 0.4, 0.35, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05],
            "pattern": { "Fb": 0.5, "Fc": -0.1, "fd": 0.0 },
            "lambda": 0.0
        }"#;
        let err = problem_from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("21"), "unexpected error: {err}");
    }
}
