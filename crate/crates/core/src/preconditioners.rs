//! Choices of the local metric `Q`: identity, clipped Hessian, clipped second
//! moments (SISA) and orthogonalized momentum (NSISA).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::newton_schulz::{newton_schulz, NsMode};
use crate::params::Layout;

/// A positive semidefinite metric, stored in the cheapest form that represents it.
#[derive(Debug, Clone, PartialEq)]
pub enum Preconditioner {
    Identity,
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl Preconditioner {
    /// `Q x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Preconditioner::Identity => x.to_vec(),
            Preconditioner::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            Preconditioner::Dense(q) => (q * linalg::to_dvector(x)).iter().copied().collect(),
        }
    }

    /// Solves `(sigma I + rho Q) x = rhs`.
    pub fn solve_shifted(&self, sigma: f64, rho: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let x = match self {
            Preconditioner::Identity => rhs.iter().map(|r| r / (sigma + rho)).collect(),
            Preconditioner::Diagonal(d) => {
                if d.len() != rhs.len() {
                    return Err(Error::ShapeMismatch {
                        expected: d.len(),
                        got: rhs.len(),
                    });
                }
                rhs.iter().zip(d).map(|(r, q)| r / (sigma + rho * q)).collect()
            }
            Preconditioner::Dense(q) => {
                linalg::solve_shifted_spd(q, sigma, rho, rhs).ok_or(Error::LocalSolveFailed)?
            }
        };
        if linalg::all_finite(&x) {
            Ok(x)
        } else {
            Err(Error::LocalSolveFailed)
        }
    }

    pub fn to_dense(&self, p: usize) -> DMatrix<f64> {
        match self {
            Preconditioner::Identity => DMatrix::identity(p, p),
            Preconditioner::Diagonal(d) => DMatrix::from_diagonal(&linalg::to_dvector(d)),
            Preconditioner::Dense(q) => q.clone(),
        }
    }

    /// Smallest and largest eigenvalue.
    pub fn spectrum_bounds(&self) -> (f64, f64) {
        match self {
            Preconditioner::Identity => (1.0, 1.0),
            Preconditioner::Diagonal(d) => d
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))),
            Preconditioner::Dense(q) => {
                let eig = q.clone().symmetric_eigenvalues();
                (eig.min(), eig.max())
            }
        }
    }

    /// Whether `eta I >= Q >= 0` holds up to `tol`.
    pub fn within_bounds(&self, eta: f64, tol: f64) -> bool {
        let (lo, hi) = self.spectrum_bounds();
        lo >= -tol && hi <= eta + tol
    }
}

pub fn q_identity() -> Preconditioner {
    Preconditioner::Identity
}

/// Projects the spectrum of a symmetric `h` onto `[0, eta]`.
pub fn q_hessian(h: &DMatrix<f64>, eta: f64) -> Result<Preconditioner> {
    if !h.is_square() {
        return Err(Error::invalid("h", "matrix must be square"));
    }
    if !h.iter().all(|x| x.is_finite()) {
        return Err(Error::Eigendecomposition);
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000).ok_or(Error::Eigendecomposition)?;
    let clamped = eig.eigenvalues.map(|l| l.clamp(0.0, eta));
    let v = &eig.eigenvectors;
    let q = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok(Preconditioner::Dense((&q + q.transpose()) * 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MomentScheme {
    /// Running sum (AdaGrad-like).
    #[serde(rename = "I", alias = "i")]
    I,
    /// Exponential average (RMSProp-like).
    #[serde(rename = "II", alias = "ii")]
    II,
    /// Bias-corrected exponential average (Adam-like).
    #[default]
    #[serde(rename = "III", alias = "iii")]
    III,
}

/// Second-moment accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub scheme: MomentScheme,
    pub beta: f64,
    pub m_tilde: Vec<f64>,
    pub n_acc: Vec<f64>,
    /// Number of updates applied so far.
    pub steps: u64,
}

impl MomentState {
    pub fn new(scheme: MomentScheme, beta: f64, p: usize) -> Result<Self> {
        if scheme != MomentScheme::I && !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid("beta", format!("must lie in (0, 1), got {beta}")));
        }
        Ok(Self {
            scheme,
            beta,
            m_tilde: vec![0.0; p],
            n_acc: vec![0.0; p],
            steps: 0,
        })
    }
}

/// Folds `u ⊙ u` into the accumulator and returns the new `m_tilde`.
pub fn moment_update<'a>(state: &'a mut MomentState, u: &[f64]) -> &'a [f64] {
    debug_assert_eq!(u.len(), state.m_tilde.len());
    state.steps += 1;
    let beta = state.beta;
    match state.scheme {
        MomentScheme::I => {
            for (m, x) in state.m_tilde.iter_mut().zip(u) {
                *m += x * x;
            }
        }
        MomentScheme::II => {
            for (m, x) in state.m_tilde.iter_mut().zip(u) {
                *m = beta * *m + (1.0 - beta) * x * x;
            }
        }
        MomentScheme::III => {
            let correction = 1.0 - beta.powi(state.steps.min(i32::MAX as u64) as i32);
            for ((n, m), x) in state.n_acc.iter_mut().zip(state.m_tilde.iter_mut()).zip(u) {
                *n = beta * *n + (1.0 - beta) * x * x;
                *m = *n / correction;
            }
        }
    }
    &state.m_tilde
}

/// `min(m_tilde, eta^2)` elementwise.
pub fn clip_moment(m_tilde: &[f64], eta: f64) -> Vec<f64> {
    let cap = eta * eta;
    m_tilde.iter().map(|&m| m.min(cap)).collect()
}

/// `(pi + g) / (sigma + rho * sqrt(m))`; the caller subtracts it from `w`.
pub fn sisa_local_step(pi: &[f64], g: &[f64], m: &[f64], sigma: f64, rho: f64) -> Vec<f64> {
    pi.iter()
        .zip(g)
        .zip(m)
        .map(|((p, g), m)| (p + g) / (sigma + rho * m.sqrt()))
        .collect()
}

/// Elementwise NSISA step with `m = (pi + o)^2`. Entries where `pi + o`
/// vanishes (`|x| <= zero_tol`) get the `eps_pow` nudge; `v` marks them.
pub fn nsisa_local_step(
    pi: &[f64],
    o: &[f64],
    eps_pow: f64,
    sigma: f64,
    rho: f64,
    zero_tol: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut step = Vec::with_capacity(pi.len());
    let mut v = Vec::with_capacity(pi.len());
    for (p, o) in pi.iter().zip(o) {
        let s = p + o;
        let hit = if zero_tol > 0.0 { s.abs() <= zero_tol } else { s == 0.0 };
        let vi = if hit { 1.0 } else { 0.0 };
        step.push((s + eps_pow * vi) / (sigma + rho * s.abs()));
        v.push(vi);
    }
    (step, v)
}

/// Diagonal metric `p` for which the generic solve reproduces the NSISA step
/// from the raw gradient `g`. Entries may be negative or non-finite.
#[allow(clippy::too_many_arguments)]
pub fn nsisa_metric(pi: &[f64], g: &[f64], o: &[f64], v: &[f64], eps_pow: f64, sigma: f64, rho: f64) -> Vec<f64> {
    (0..pi.len())
        .map(|j| {
            let s = pi[j] + o[j];
            (sigma + rho * s.abs()) * (pi[j] + g[j]) / (rho * (s + eps_pow * v[j])) - sigma / rho
        })
        .collect()
}

/// Configuration of the preconditioner family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PreconditionerKind {
    Identity,
    Hessian,
    Moment {
        #[serde(default)]
        scheme: MomentScheme,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    NewtonSchulz {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        mode: NsMode,
        #[serde(default = "default_ns_iters")]
        iters: usize,
        #[serde(default)]
        zero_tol: f64,
        /// Second-moment rule for vector-shaped blocks.
        #[serde(default)]
        scheme: MomentScheme,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

fn default_beta() -> f64 {
    0.999
}
fn default_momentum() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    0.5
}
fn default_ns_iters() -> usize {
    5
}

impl PreconditionerKind {
    pub fn needs_hessian(&self) -> bool {
        matches!(self, PreconditionerKind::Hessian)
    }

    pub fn validate(&self, eta: f64) -> Result<()> {
        match *self {
            PreconditionerKind::Identity if eta < 1.0 => {
                Err(Error::invalid("eta", "identity preconditioner needs eta >= 1"))
            }
            PreconditionerKind::Moment { scheme, beta } if scheme != MomentScheme::I && !(beta > 0.0 && beta < 1.0) => {
                Err(Error::invalid("beta", format!("must lie in (0, 1), got {beta}")))
            }
            PreconditionerKind::NewtonSchulz {
                momentum, eps, iters, zero_tol, beta, ..
            } => {
                if !(momentum > 0.0) || !momentum.is_finite() {
                    return Err(Error::invalid("momentum", "must be positive"));
                }
                if !(eps > 0.0 && eps < 1.0) {
                    return Err(Error::invalid("eps", "must lie in (0, 1)"));
                }
                if iters == 0 {
                    return Err(Error::invalid("ns_iters", "must be at least 1"));
                }
                if !(zero_tol >= 0.0) {
                    return Err(Error::invalid("zero_tol", "must be nonnegative"));
                }
                if !(beta > 0.0 && beta < 1.0) {
                    return Err(Error::invalid("beta", "must lie in (0, 1)"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// What a client needs to finish its local step once `sigma` has advanced.
#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    /// Solve `(sigma I + rho Q) s = pi + g`.
    Metric(Preconditioner),
    /// Closed-form elementwise step `numer / (sigma + rho * sqrt_m)`.
    Elementwise { numer: Vec<f64>, sqrt_m: Vec<f64> },
}

impl Prepared {
    pub fn step(&self, pi: &[f64], g: &[f64], sigma: f64, rho: f64) -> Result<Vec<f64>> {
        match self {
            Prepared::Metric(q) => {
                let rhs: Vec<f64> = pi.iter().zip(g).map(|(a, b)| a + b).collect();
                q.solve_shifted(sigma, rho, &rhs)
            }
            Prepared::Elementwise { numer, sqrt_m } => Ok(numer
                .iter()
                .zip(sqrt_m)
                .map(|(n, s)| n / (sigma + rho * s))
                .collect()),
        }
    }
}

/// Per-client buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct PreconditionerState {
    pub kind: PreconditionerKind,
    pub eta: f64,
    pub moment: Option<MomentState>,
    /// NSISA momentum `b`.
    pub momentum: Vec<f64>,
}

impl PreconditionerState {
    pub fn new(kind: PreconditionerKind, eta: f64, p: usize) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid("eta", "must be positive and finite"));
        }
        kind.validate(eta)?;
        let moment = match kind {
            PreconditionerKind::Moment { scheme, beta } | PreconditionerKind::NewtonSchulz { scheme, beta, .. } => {
                Some(MomentState::new(scheme, beta, p)?)
            }
            _ => None,
        };
        let momentum = match kind {
            PreconditionerKind::NewtonSchulz { .. } => vec![0.0; p],
            _ => Vec::new(),
        };
        Ok(Self {
            kind,
            eta,
            moment,
            momentum,
        })
    }

    /// Builds this iteration's metric from the current dual `pi`, gradient `g`
    /// and (for the Hessian kind) the batch Hessian. `step_index` is `ℓ+1`.
    pub fn prepare(
        &mut self,
        pi: &[f64],
        g: &[f64],
        hessian: Option<&DMatrix<f64>>,
        layout: &Layout,
        step_index: u64,
    ) -> Result<Prepared> {
        let eta = self.eta;
        match self.kind.clone() {
            PreconditionerKind::Identity => Ok(Prepared::Metric(q_identity())),
            PreconditionerKind::Hessian => {
                let h = hessian.ok_or(Error::HessianUnsupported)?;
                Ok(Prepared::Metric(q_hessian(h, eta)?))
            }
            PreconditionerKind::Moment { .. } => {
                let u: Vec<f64> = pi.iter().zip(g).map(|(a, b)| a + b).collect();
                let state = self.moment.as_mut().expect("moment buffers");
                let m = clip_moment(moment_update(state, &u), eta);
                Ok(Prepared::Metric(Preconditioner::Diagonal(
                    m.iter().map(|x| x.sqrt()).collect(),
                )))
            }
            PreconditionerKind::NewtonSchulz {
                momentum,
                eps,
                mode,
                iters,
                zero_tol,
                ..
            } => {
                for (b, gi) in self.momentum.iter_mut().zip(g) {
                    *b = momentum * *b + gi;
                }
                let u: Vec<f64> = pi.iter().zip(g).map(|(a, b)| a + b).collect();
                let state = self.moment.as_mut().expect("moment buffers");
                let fallback_m = clip_moment(moment_update(state, &u), eta);
                let eps_pow = eps.powf(step_index as f64);

                let mut numer = u;
                let mut sqrt_m: Vec<f64> = fallback_m.iter().map(|x| x.sqrt()).collect();
                for (off, shape) in layout.spans() {
                    let Some((rows, cols)) = shape.matrix else { continue };
                    let range = off..off + shape.len;
                    let b = DMatrix::from_row_slice(rows, cols, &self.momentum[range.clone()]);
                    let o = newton_schulz(&b, mode, iters)?;
                    // nalgebra is column-major; read back in row-major order.
                    let o_flat: Vec<f64> = o.transpose().iter().copied().collect();
                    for (k, j) in range.enumerate() {
                        let s = pi[j] + o_flat[k];
                        let hit = if zero_tol > 0.0 { s.abs() <= zero_tol } else { s == 0.0 };
                        numer[j] = s + if hit { eps_pow } else { 0.0 };
                        sqrt_m[j] = s.abs();
                    }
                }
                Ok(Prepared::Elementwise { numer, sqrt_m })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::BlockShape;

    #[test]
    fn hessian_clamp() {
        let h = DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, -1.0]);
        let q = q_hessian(&h, 2.0).unwrap().to_dense(2);
        let want = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        assert!((q - want).norm() < 1e-12);
    }

    #[test]
    fn hessian_inside_bound_is_untouched() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let q = q_hessian(&h, 4.0).unwrap().to_dense(2);
        assert!((q - h).norm() < 1e-12);
    }

    #[test]
    fn scheme_one_accumulates() {
        let mut s = MomentState::new(MomentScheme::I, 0.0, 2).unwrap();
        assert_eq!(moment_update(&mut s, &[3.0, -3.0]), &[9.0, 9.0]);
    }

    #[test]
    fn scheme_three_bias_correction() {
        let mut s = MomentState::new(MomentScheme::III, 0.9, 2).unwrap();
        moment_update(&mut s, &[2.0, 0.0]);
        assert!((s.n_acc[0] - 0.4).abs() < 1e-15);
        assert!((s.m_tilde[0] - 4.0).abs() < 1e-12);
        assert_eq!(s.m_tilde[1], 0.0);
    }

    #[test]
    fn scheme_three_constant_input_recovers_square() {
        let mut s = MomentState::new(MomentScheme::III, 0.99, 1).unwrap();
        for _ in 0..500 {
            moment_update(&mut s, &[1.7]);
            assert!((s.m_tilde[0] - 1.7 * 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn scheme_two_decays_without_input() {
        let mut s = MomentState::new(MomentScheme::II, 0.5, 1).unwrap();
        moment_update(&mut s, &[2.0]);
        let before = s.m_tilde[0];
        moment_update(&mut s, &[0.0]);
        assert_eq!(s.m_tilde[0], 0.5 * before);
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_moment(&[9.0, 100.0, 10_000.0], 10.0), vec![9.0, 100.0, 100.0]);
        let q = Preconditioner::Diagonal(clip_moment(&[9.0, 100.0, 10_000.0], 10.0).iter().map(|x| x.sqrt()).collect());
        assert_eq!(q.spectrum_bounds().1, 10.0);
    }

    #[test]
    fn sisa_hand_instance() {
        let s = sisa_local_step(&[0.0, 0.0], &[3.0, -3.0], &[9.0, 9.0], 1.0, 1.0);
        assert_eq!(s, vec![0.75, -0.75]);
        let s = sisa_local_step(&[1.0], &[1.0], &[0.0], 4.0, 3.0);
        assert_eq!(s, vec![0.5]);
    }

    #[test]
    fn identity_matches_unit_moment() {
        let pi = [0.3, -1.0, 2.0];
        let g = [1.0, 0.5, -0.25];
        let a = Preconditioner::Identity.solve_shifted(2.0, 0.7, &[1.3, -0.5, 1.75]).unwrap();
        let b = sisa_local_step(&pi, &g, &[1.0; 3], 2.0, 0.7);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn nsisa_zero_entry_gets_nudge() {
        let (step, v) = nsisa_local_step(&[0.5, 1.0], &[-0.5, 1.0], 0.25, 2.0, 1.0, 0.0);
        assert_eq!(v, vec![1.0, 0.0]);
        assert_eq!(step[0], 0.25 / 2.0);
        assert_eq!(step[1], 2.0 / 4.0);
    }

    #[test]
    fn nsisa_metric_reconstructs_step() {
        let pi = [0.2, -0.1, 0.4];
        let g = [0.5, 0.3, -1.2];
        let o = [0.6, -0.8, 0.1];
        let (sigma, rho) = (1.5, 2.0);
        let (step, v) = nsisa_local_step(&pi, &o, 0.0, sigma, rho, 0.0);
        let p = nsisa_metric(&pi, &g, &o, &v, 0.0, sigma, rho);
        let rhs: Vec<f64> = pi.iter().zip(&g).map(|(a, b)| a + b).collect();
        let dense = Preconditioner::Dense(DMatrix::from_diagonal(&linalg::to_dvector(&p)));
        for j in 0..3 {
            if p[j].is_finite() && p[j] > 0.0 {
                let x = rhs[j] / (sigma + rho * p[j]);
                assert!((x - step[j]).abs() < 1e-8);
            }
        }
        let _ = dense;
    }

    #[test]
    fn nsisa_momentum_recurrence() {
        let layout = Layout::new(vec![BlockShape::vector(2)]);
        let kind = PreconditionerKind::NewtonSchulz {
            momentum: 0.9,
            eps: 0.5,
            mode: NsMode::Quintic,
            iters: 5,
            zero_tol: 0.0,
            scheme: MomentScheme::III,
            beta: 0.9,
        };
        let mut st = PreconditionerState::new(kind, 10.0, 2).unwrap();
        let gs = [[1.0, -2.0], [0.5, 0.25], [-3.0, 4.0]];
        for (k, g) in gs.iter().enumerate() {
            st.prepare(&[0.0, 0.0], g, None, &layout, k as u64 + 1).unwrap();
        }
        let want0 = (0.9 * (0.9 * 1.0 + 0.5)) + -3.0;
        let want1 = (0.9 * (0.9 * -2.0 + 0.25)) + 4.0;
        assert_eq!(st.momentum, vec![want0, want1]);
    }

    #[test]
    fn identity_requires_eta_at_least_one() {
        assert!(PreconditionerState::new(PreconditionerKind::Identity, 0.5, 3).is_err());
        assert!(PreconditionerState::new(PreconditionerKind::Identity, 1.0, 3).is_ok());
    }
}
