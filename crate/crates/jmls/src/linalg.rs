//! Small dense linear-algebra helpers shared by the filtering modules.
//!
//! All covariance-like matrices in this crate are kept symmetric by
//! explicit symmetrization after every update, and factored with Cholesky
//! whenever positive definiteness is part of the contract.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative pivot tolerance used when *validating* positive definiteness.
pub const PIVOT_RTOL: f64 = 1e-12;

/// Returns the symmetric part `(m + mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize_in_place(&mut s);
    s
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Maximum absolute asymmetry `max |m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// `label` names the matrix in the error message.
pub fn cholesky_spd(m: &DMatrix<f64>, label: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(label.to_string()))
}

/// Validation-grade positive definiteness check: Cholesky must succeed and
/// no pivot may fall below `PIVOT_RTOL` relative to the largest diagonal.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    match m.clone().cholesky() {
        None => false,
        Some(ch) => {
            let l = ch.l_dirty();
            let max_diag = (0..m.nrows()).map(|i| m[(i, i)]).fold(0.0f64, f64::max);
            (0..m.nrows()).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_RTOL * max_diag)
        }
    }
}

/// `ln |M|` for a matrix already factored as `M = L Lᵀ`.
pub fn ln_det_from_cholesky(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `vᵀ M⁻¹ v` for a matrix already factored as `M = L Lᵀ`.
pub fn inv_quad_form(ch: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    let x = ch.solve(v);
    v.dot(&x)
}

/// Signed log-determinant via LU: returns `(sign, ln |det|)`.
///
/// `sign` is `0.0` for an exactly singular matrix.
pub fn sign_ln_det(m: &DMatrix<f64>) -> (f64, f64) {
    let lu = m.clone().lu();
    let mut sign = lu.p().determinant::<f64>();
    let mut ln_abs = 0.0;
    let u = lu.u();
    for i in 0..u.nrows() {
        let d: f64 = u[(i, i)];
        if d == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if d < 0.0 {
            sign = -sign;
        }
        ln_abs += d.abs().ln();
    }
    (sign, ln_abs)
}

/// `ln N(x | mean, cov)` with `cov` pre-factored.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov_chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let dim = x.len() as f64;
    let diff = x - mean;
    -0.5 * (dim * (2.0 * std::f64::consts::PI).ln()
        + ln_det_from_cholesky(cov_chol)
        + inv_quad_form(cov_chol, &diff))
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal bases of equal rank, from the singular values of `uaᵀ ub`.
pub fn max_principal_angle(ua: &DMatrix<f64>, ub: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(ua.ncols(), ub.ncols());
    let prod = ua.transpose() * ub;
    let svd = prod.svd(false, false);
    let sigma_min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    sigma_min.clamp(-1.0, 1.0).acos()
}

/// Smallest eigenvalue of a symmetric matrix (PSD assertions in tests).
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
