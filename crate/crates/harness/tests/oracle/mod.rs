//! Reference computations written without the library under test.

#![allow(dead_code)]

/// Row-major square matrix helpers.
pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

/// One-sided Jacobi SVD of a square matrix: returns `(U, s, V)` with
/// `A = U diag(s) V^T`, all row-major.
pub fn jacobi_svd(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut u = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let (up, uq) = (u[i * n + p], u[i * n + q]);
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    for i in 0..n {
                        let (xp, xq) = (m[i * n + p], m[i * n + q]);
                        m[i * n + p] = c * xp - s * xq;
                        m[i * n + q] = s * xp + c * xq;
                    }
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv = vec![0.0; n];
    for j in 0..n {
        let norm = (0..n).map(|i| u[i * n + j] * u[i * n + j]).sum::<f64>().sqrt();
        sv[j] = norm;
        for i in 0..n {
            u[i * n + j] /= norm;
        }
    }
    (u, sv, v)
}

/// `U V^T`
pub fn polar(a: &[f64], n: usize) -> Vec<f64> {
    let (u, _, v) = jacobi_svd(a, n);
    matmul(&u, &transpose(&v, n), n)
}

pub fn singular_values(a: &[f64], n: usize) -> Vec<f64> {
    let mut s = jacobi_svd(a, n).1;
    s.sort_by(f64::total_cmp);
    s
}

/// Central differences of a scalar function.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|j| {
            x[j] = w[j] + h;
            let up = f(&x);
            x[j] = w[j] - h;
            let down = f(&x);
            x[j] = w[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Least-squares slope of `ln(series)` against the index, exponentiated.
pub fn log_slope_ratio(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let xs: Vec<f64> = (0..series.len()).map(|i| i as f64).collect();
    let ys: Vec<f64> = series.iter().map(|s| s.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let den: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    (num / den).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_reconstructs() {
        let a = [4.0, 1.0, -2.0, 0.5, 3.0, 1.0, 2.0, -1.0, 5.0];
        let (u, s, v) = jacobi_svd(&a, 3);
        let mut us = u.clone();
        for i in 0..3 {
            for j in 0..3 {
                us[i * 3 + j] *= s[j];
            }
        }
        let back = matmul(&us, &transpose(&v, 3), 3);
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
