//! Dense symmetric solves and spectral helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const RIDGE_BASE: f64 = 1e-8;
const RIDGE_ESCALATIONS: usize = 3;

/// Solves `a z = b` for symmetric positive definite `a` by Cholesky.
///
/// On failure a ridge of `1e-8 * trace/d` is added and grown tenfold up to
/// three times before giving up.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: a.ncols() });
    }
    if b.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: b.len() });
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let scale = (a.trace() / d.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut ridge = RIDGE_BASE * scale;
    for _ in 0..=RIDGE_ESCALATIONS {
        let mut shifted = a.clone();
        for i in 0..d {
            shifted[(i, i)] += ridge;
        }
        if let Some(chol) = shifted.cholesky() {
            return Ok(chol.solve(b));
        }
        ridge *= 10.0;
    }
    Err(Error::Factorization { min_eigenvalue: min_eigenvalue(a) })
}

/// Solves `(scale * G G^T + ridge I) z = b` where `G` is `d x k`.
///
/// Uses the `k x k` capacitance system when `k < d`.
pub fn low_rank_solve(g: &DMatrix<f64>, scale: f64, ridge: f64, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (d, k) = g.shape();
    if b.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: b.len() });
    }
    if !(ridge > 0.0) || !(scale > 0.0) {
        return Err(Error::InvalidParameter(format!("low-rank solve needs ridge > 0 and scale > 0, got {ridge}, {scale}")));
    }
    if k >= d {
        let mut full = g * g.transpose() * scale;
        for i in 0..d {
            full[(i, i)] += ridge;
        }
        return spd_solve(&full, b);
    }
    let mut cap = g.transpose() * g;
    for i in 0..k {
        cap[(i, i)] += ridge / scale;
    }
    let gtb = g.transpose() * b;
    let inner = spd_solve(&cap, &gtb)?;
    Ok((b - g * inner) / ridge)
}

pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut vals: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.total_cmp(x));
    vals
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).last().copied().unwrap_or(f64::NAN)
}

/// Spectral norm of a symmetric matrix: largest absolute eigenvalue.
pub fn symmetric_spectral_norm(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Largest absolute eigenvalue by power iteration, for cross-checking the eigensolver.
pub fn power_iteration(a: &DMatrix<f64>, iterations: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    // deterministic start vector with no special structure
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = v.dot(&w).abs();
        v = w / norm;
    }
    estimate.max((a * &v).norm())
}
