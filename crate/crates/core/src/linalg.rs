//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numeric, Result};

/// Relative ridge added to the diagonal of every normal-equation system.
pub const RIDGE: f64 = 1e-10;

/// Symmetric Toeplitz matrix `T[i][j] = c[|i - j|]`.
pub fn toeplitz(c: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| c[i.abs_diff(j)])
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solve `M x = b` for symmetric positive definite `M` via Cholesky.
pub fn spd_solve(m: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m
        .cholesky()
        .ok_or_else(|| numeric("normal equations are not positive definite"))?;
    Ok(chol.solve(b))
}

/// `M + RIDGE * scale * I`.
pub fn ridged(mut m: DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let eps = RIDGE * scale.abs().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    m
}

/// Levinson-Durbin recursion for `T(r[0..p]) h = r[1..=p]`.
///
/// Returns `None` when a reflection coefficient reaches the unit circle, i.e.
/// the sequence is not positive definite to working precision.
pub fn levinson(r: &[f64], p: usize) -> Option<Vec<f64>> {
    if p == 0 {
        return Some(Vec::new());
    }
    if r.len() <= p || !(r[0] > 0.0) {
        return None;
    }
    let mut a = vec![0.0; p];
    let mut prev = vec![0.0; p];
    let mut err = r[0];
    for m in 0..p {
        let mut acc = r[m + 1];
        for j in 0..m {
            acc -= a[j] * r[m - j];
        }
        let k = acc / err;
        if !k.is_finite() || k.abs() >= 1.0 {
            return None;
        }
        prev[..m].copy_from_slice(&a[..m]);
        for j in 0..m {
            a[j] = prev[j] - k * prev[m - 1 - j];
        }
        a[m] = k;
        err *= 1.0 - k * k;
        if !(err > 0.0) {
            return None;
        }
    }
    Some(a)
}

pub fn log2_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| numeric("matrix is not positive definite"))?;
    let l = chol.l();
    Ok((0..m.nrows()).map(|i| 2.0 * l[(i, i)].log2()).sum())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(invalid(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{what} has non-finite entries")));
    }
    Ok(m.nrows())
}
