//! Small dense linear-algebra helpers used throughout the crate.
//!
//! Everything here operates on `nalgebra` dynamic matrices at desk scale
//! (dimensions of a few dozen at most), so clarity wins over cleverness.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Returns the symmetric part `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Maximum relative asymmetry `|m - m^T| / (1 + |m|)` over all entries.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = 1.0 + m.amax();
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs() / scale);
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Validates that `m` is square of size `dim`, symmetric, and positive
/// definite; reports the offending matrix by name otherwise.
pub fn check_spd(m: &DMatrix<f64>, dim: usize, name: &str) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch {
            name: name.to_string(),
            expected: format!("{dim}x{dim}"),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    let dev = asymmetry(m);
    if dev > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            name: name.to_string(),
            deviation: dev,
        });
    }
    let min_eig = min_symmetric_eigenvalue(&symmetrize(m));
    if min_eig <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            name: name.to_string(),
            min_eigenvalue: min_eig,
        });
    }
    Ok(())
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues in `[-clamp_tol, 0)` are treated as exact zeros, which is the
/// limiting convention for degenerate covariance blocks.
pub fn psd_sqrt(m: &DMatrix<f64>, clamp_tol: f64) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < -clamp_tol {
                return Err(Error::NotPositiveDefinite {
                    name: "psd_sqrt argument".to_string(),
                    min_eigenvalue: *v,
                });
            }
            *v = 0.0;
        }
    }
    let sqrt_vals = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt()));
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&sqrt_vals) * q.transpose())
}

/// Matrix 2-norm (largest singular value) by power iteration on `m^T m`.
///
/// Tolerance 1e-10 on the Rayleigh quotient, iteration cap `10 * dim`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let dim = m.ncols();
    if dim == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mtm = m.transpose() * m;
    if mtm.amax() == 0.0 {
        return 0.0;
    }
    // Deterministic start with a mild tilt so it is not orthogonal to the
    // dominant eigenvector for structured inputs.
    let mut v = DVector::from_iterator(dim, (0..dim).map(|i| 1.0 + 0.01 * i as f64));
    v /= v.norm();
    let mut rayleigh = 0.0_f64;
    for _ in 0..(10 * dim).max(30) {
        let w = &mtm * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - rayleigh).abs() <= 1e-10 * (1.0 + next.abs()) {
            rayleigh = next;
            break;
        }
        rayleigh = next;
    }
    rayleigh.max(0.0).sqrt()
}

/// Condition number of a symmetric matrix from its eigenvalue spread.
/// Returns `f64::INFINITY` when the smallest eigenvalue magnitude vanishes.
pub fn symmetric_condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let mut min_abs = f64::INFINITY;
    let mut max_abs = 0.0_f64;
    for v in eig.eigenvalues.iter() {
        min_abs = min_abs.min(v.abs());
        max_abs = max_abs.max(v.abs());
    }
    if min_abs == 0.0 {
        f64::INFINITY
    } else {
        max_abs / min_abs
    }
}

/// Row-major nested array view of a matrix, for JSON dumps.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetrize_kills_asymmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let s = symmetrize(&m);
        assert_eq!(s[(0, 1)], s[(1, 0)]);
        assert_eq!(asymmetry(&s), 0.0);
    }

    #[test]
    fn spd_check_rejects_zero_matrix() {
        let z = DMatrix::zeros(2, 2);
        assert!(matches!(
            check_spd(&z, 2, "Z"),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&m, 1e-12).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_accepts_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = psd_sqrt(&m, 1e-12).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_matches_known_values() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -4.0]);
        assert_relative_eq!(spectral_norm(&m), 4.0, epsilon = 1e-8);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3)), 0.0);
        // Non-symmetric: singular values of [[0,2],[0,0]] are {2, 0}.
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert_relative_eq!(spectral_norm(&n), 2.0, epsilon = 1e-8);
    }
}
