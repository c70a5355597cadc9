//! Flat-vector helpers and the few dense routines the solver needs.

use nalgebra::{DMatrix, DVector};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn to_dvector(a: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(a)
}

/// Solves `(sigma I + rho Q) x = rhs` for symmetric positive semidefinite `Q`
/// by Cholesky factorization. Returns `None` if the system is not positive definite.
pub fn solve_shifted_spd(q: &DMatrix<f64>, sigma: f64, rho: f64, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let mut m = q * rho;
    for i in 0..n {
        m[(i, i)] += sigma;
    }
    let chol = m.cholesky()?;
    let x = chol.solve(&to_dvector(rhs));
    Some(x.iter().copied().collect())
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(a: &DMatrix<f64>, iters: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let av = a * &v;
        let nrm = av.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&av);
        v = av / nrm;
    }
    lambda.max(v.dot(&(a * &v)))
}
