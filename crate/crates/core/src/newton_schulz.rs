//! Newton–Schulz approximations of the orthogonal polar factor `U V^T`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of the quintic iteration used by the Muon optimizer.
pub const QUINTIC_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Added to the Frobenius norm before pre-scaling.
pub const PRESCALE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NsMode {
    /// Fast quintic polynomial; lands singular values in a band around 1.
    #[default]
    Quintic,
    /// `X <- 1.5 X - 0.5 X X^T X`; converges to the exact polar factor.
    Cubic,
}

/// Approximates the orthogonal polar factor of `b` after Frobenius pre-scaling.
pub fn newton_schulz(b: &DMatrix<f64>, mode: NsMode, iters: usize) -> Result<DMatrix<f64>> {
    let fro = b.norm();
    if fro == 0.0 {
        return Err(Error::ZeroMomentum);
    }
    if !fro.is_finite() {
        return Err(Error::NumericalOverflow);
    }
    // Iterate on the wide orientation so X X^T is the smaller Gram matrix.
    let tall = b.nrows() > b.ncols();
    let mut x = if tall { b.transpose() } else { b.clone() };
    x /= fro + PRESCALE_EPS;
    match mode {
        NsMode::Cubic => {
            for _ in 0..iters {
                let xxt = &x * x.transpose();
                x = &x * 1.5 - (&xxt * &x) * 0.5;
            }
        }
        NsMode::Quintic => {
            let (a, bc, c) = QUINTIC_COEFFS;
            for _ in 0..iters {
                let gram = &x * x.transpose();
                let poly = &gram * bc + (&gram * &gram) * c;
                x = &x * a + poly * &x;
            }
        }
    }
    Ok(if tall { x.transpose() } else { x })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_diagonal_has_identity_factor() {
        let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0]));
        let o = newton_schulz(&b, NsMode::Cubic, 40).unwrap();
        assert!((o - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn orthogonal_input_is_reproduced() {
        let (c, s) = (0.6f64, 0.8f64);
        let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let o = newton_schulz(&q, NsMode::Cubic, 40).unwrap();
        assert!((o - &q).norm() < 1e-12);
    }

    #[test]
    fn zero_momentum_is_rejected() {
        let z = DMatrix::<f64>::zeros(3, 2);
        assert_eq!(newton_schulz(&z, NsMode::Quintic, 5), Err(Error::ZeroMomentum));
    }

    #[test]
    fn tall_inputs_keep_their_shape() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.3, 1.0, 0.5, 0.5]);
        let o = newton_schulz(&b, NsMode::Cubic, 40).unwrap();
        assert_eq!(o.shape(), (3, 2));
        let oto = o.transpose() * &o;
        assert!((oto - DMatrix::<f64>::identity(2, 2)).norm() < 1e-10);
    }
}
