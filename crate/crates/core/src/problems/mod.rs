//! Differentiable objectives over a dataset, with the ridge split between the
//! per-client losses and the global term.
//!
//! Each client objective is the batch mean of a per-sample loss plus
//! `((mu - lambda) / 2) ||w||^2`; the remaining `lambda` ridge sits on the
//! global variable.

mod dataset;
pub mod idx;
mod synthetic;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, Targets};
pub use synthetic::{gen_blobs, gen_least_squares, gen_least_squares_scaled, BlobSpec};

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{BlockShape, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ProblemKind {
    LeastSquares,
    MultinomialLogistic,
    /// One tanh hidden layer with squared loss.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone)]
pub struct Problem {
    kind: ProblemKind,
    dataset: Dataset,
    mu: f64,
    lambda: f64,
    layout: Layout,
    outputs: usize,
}

impl Problem {
    pub fn new(kind: ProblemKind, dataset: Dataset, mu: f64, lambda: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::invalid("mu", "must be finite and nonnegative"));
        }
        if !(0.0..=mu).contains(&lambda) {
            return Err(Error::invalid("lambda", "must lie in [0, mu]"));
        }
        let d = dataset.dim();
        let (layout, outputs) = match kind {
            ProblemKind::LeastSquares => {
                if dataset.classes().is_some() {
                    return Err(Error::invalid("targets", "least squares needs real targets"));
                }
                (Layout::new(vec![BlockShape::vector(d)]), 1)
            }
            ProblemKind::MultinomialLogistic => {
                let k = dataset.classes().ok_or(Error::LabelsRequired)?;
                (
                    Layout::new(vec![BlockShape::matrix(d, k), BlockShape::vector(k)]),
                    k,
                )
            }
            ProblemKind::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::invalid("hidden", "must be at least 1"));
                }
                let o = dataset.classes().unwrap_or(1);
                (
                    Layout::new(vec![
                        BlockShape::matrix(hidden, d),
                        BlockShape::vector(hidden),
                        BlockShape::matrix(o, hidden),
                        BlockShape::vector(o),
                    ]),
                    o,
                )
            }
        };
        Ok(Self {
            kind,
            dataset,
            mu,
            lambda,
            layout,
            outputs,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Ridge weight carried by each client objective.
    pub fn local_ridge(&self) -> f64 {
        self.mu - self.lambda
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total_len()
    }

    /// Same objective with a different global/local ridge split.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Problem::new(self.kind, self.dataset.clone(), self.mu, lambda)
    }

    fn check_inputs(&self, w: &[f64], batch: &[usize]) -> Result<()> {
        self.layout.check(w)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.dataset.len()) {
            return Err(Error::invalid("batch", format!("index {bad} out of range")));
        }
        if !linalg::all_finite(w) {
            return Err(Error::NumericalOverflow);
        }
        Ok(())
    }

    /// Batch-mean loss plus the local ridge term.
    pub fn loss(&self, w: &[f64], batch: &[usize]) -> Result<f64> {
        self.check_inputs(w, batch)?;
        let mut total = 0.0;
        let mut scratch = Scratch::new(self);
        for &i in batch {
            total += self.sample_loss(w, i, &mut scratch);
        }
        let value = total / batch.len() as f64 + 0.5 * self.local_ridge() * linalg::norm_sq(w);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NumericalOverflow)
        }
    }

    /// Analytic gradient of [`Problem::loss`].
    pub fn grad(&self, w: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; w.len()];
        self.grad_into(w, batch, &mut g)?;
        Ok(g)
    }

    pub fn grad_into(&self, w: &[f64], batch: &[usize], g: &mut [f64]) -> Result<()> {
        self.check_inputs(w, batch)?;
        g.iter_mut().for_each(|x| *x = 0.0);
        let mut scratch = Scratch::new(self);
        for &i in batch {
            self.accumulate_sample_grad(w, i, g, &mut scratch);
        }
        let inv = 1.0 / batch.len() as f64;
        let ridge = self.local_ridge();
        for (gj, wj) in g.iter_mut().zip(w) {
            *gj = *gj * inv + ridge * wj;
        }
        if linalg::all_finite(g) {
            Ok(())
        } else {
            Err(Error::NumericalOverflow)
        }
    }

    /// Exact Hessian of [`Problem::loss`]; not available for the MLP.
    pub fn hessian(&self, w: &[f64], batch: &[usize]) -> Result<DMatrix<f64>> {
        if let ProblemKind::Mlp { .. } = self.kind {
            return Err(Error::HessianUnsupported);
        }
        self.check_inputs(w, batch)?;
        let p = w.len();
        let mut h = DMatrix::<f64>::zeros(p, p);
        let d = self.dataset.dim();
        match self.kind {
            ProblemKind::LeastSquares => {
                for &i in batch {
                    let a = self.dataset.row(i);
                    for r in 0..d {
                        for c in 0..d {
                            h[(r, c)] += a[r] * a[c];
                        }
                    }
                }
            }
            ProblemKind::MultinomialLogistic => {
                let k = self.outputs;
                let mut probs = vec![0.0; k];
                let mut xt = vec![1.0; d + 1];
                for &i in batch {
                    xt[..d].copy_from_slice(self.dataset.row(i));
                    self.softmax(w, self.dataset.row(i), &mut probs);
                    // Flat index j*K + k covers the weight rows and, at j = d, the bias.
                    for j in 0..=d {
                        for j2 in 0..=d {
                            let xx = xt[j] * xt[j2];
                            if xx == 0.0 {
                                continue;
                            }
                            for a in 0..k {
                                for b in 0..k {
                                    let s = if a == b { probs[a] } else { 0.0 } - probs[a] * probs[b];
                                    h[(j * k + a, j2 * k + b)] += xx * s;
                                }
                            }
                        }
                    }
                }
            }
            ProblemKind::Mlp { .. } => unreachable!(),
        }
        h /= batch.len() as f64;
        let ridge = self.local_ridge();
        for j in 0..p {
            h[(j, j)] += ridge;
        }
        if h.iter().all(|x| x.is_finite()) {
            Ok(h)
        } else {
            Err(Error::NumericalOverflow)
        }
    }

    /// Fraction of correctly classified samples; `None` for regression targets.
    pub fn accuracy(&self, w: &[f64], data: &Dataset) -> Option<f64> {
        let labels = data.labels()?;
        let mut scratch = Scratch::new(self);
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let x = data.row(i);
            let scores: &[f64] = match self.kind {
                ProblemKind::MultinomialLogistic => {
                    self.logits(w, x, &mut scratch.out);
                    &scratch.out
                }
                ProblemKind::Mlp { .. } => {
                    self.mlp_forward(w, x, &mut scratch);
                    &scratch.out
                }
                ProblemKind::LeastSquares => return None,
            };
            let pred = argmax(scores);
            if pred == y {
                correct += 1;
            }
        }
        Some(correct as f64 / labels.len() as f64)
    }

    fn sample_loss(&self, w: &[f64], i: usize, s: &mut Scratch) -> f64 {
        let x = self.dataset.row(i);
        match self.kind {
            ProblemKind::LeastSquares => {
                let r = linalg::dot(w, x) - self.real_target(i);
                0.5 * r * r
            }
            ProblemKind::MultinomialLogistic => {
                self.logits(w, x, &mut s.out);
                let y = self.label(i);
                log_sum_exp(&s.out) - s.out[y]
            }
            ProblemKind::Mlp { .. } => {
                self.mlp_forward(w, x, s);
                self.mlp_residual(i, s);
                0.5 * linalg::norm_sq(&s.out)
            }
        }
    }

    fn accumulate_sample_grad(&self, w: &[f64], i: usize, g: &mut [f64], s: &mut Scratch) {
        let x = self.dataset.row(i);
        let d = self.dataset.dim();
        match self.kind {
            ProblemKind::LeastSquares => {
                let r = linalg::dot(w, x) - self.real_target(i);
                linalg::axpy(r, x, g);
            }
            ProblemKind::MultinomialLogistic => {
                let k = self.outputs;
                self.softmax(w, x, &mut s.out);
                s.out[self.label(i)] -= 1.0;
                for (j, &xj) in x.iter().enumerate() {
                    linalg::axpy(xj, &s.out, &mut g[j * k..(j + 1) * k]);
                }
                linalg::axpy(1.0, &s.out, &mut g[d * k..(d + 1) * k]);
            }
            ProblemKind::Mlp { hidden } => {
                let o = self.outputs;
                self.mlp_forward(w, x, s);
                self.mlp_residual(i, s);
                let (w1_len, b1_off) = (hidden * d, hidden * d);
                let w2_off = b1_off + hidden;
                let b2_off = w2_off + o * hidden;
                let w2 = &w[w2_off..b2_off];
                // Output layer.
                for (oi, &r) in s.out.iter().enumerate() {
                    linalg::axpy(r, &s.hidden, &mut g[w2_off + oi * hidden..w2_off + (oi + 1) * hidden]);
                    g[b2_off + oi] += r;
                }
                // Back through tanh.
                for j in 0..hidden {
                    let dh: f64 = (0..o).map(|oi| w2[oi * hidden + j] * s.out[oi]).sum();
                    let da = dh * (1.0 - s.hidden[j] * s.hidden[j]);
                    linalg::axpy(da, x, &mut g[j * d..(j + 1) * d]);
                    g[b1_off + j] += da;
                }
                debug_assert_eq!(w1_len, b1_off);
            }
        }
    }

    fn real_target(&self, i: usize) -> f64 {
        match self.dataset.targets() {
            Targets::Real(b) => b[i],
            Targets::Labels { labels, .. } => labels[i] as f64,
        }
    }

    fn label(&self, i: usize) -> usize {
        match self.dataset.targets() {
            Targets::Labels { labels, .. } => labels[i],
            Targets::Real(_) => unreachable!("classification problem without labels"),
        }
    }

    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        let k = self.outputs;
        let d = x.len();
        out.copy_from_slice(&w[d * k..(d + 1) * k]);
        for (j, &xj) in x.iter().enumerate() {
            linalg::axpy(xj, &w[j * k..(j + 1) * k], out);
        }
    }

    fn softmax(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        self.logits(w, x, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        out.iter_mut().for_each(|v| *v /= sum);
    }

    fn mlp_forward(&self, w: &[f64], x: &[f64], s: &mut Scratch) {
        let ProblemKind::Mlp { hidden } = self.kind else {
            unreachable!()
        };
        let d = x.len();
        let o = self.outputs;
        let b1_off = hidden * d;
        let w2_off = b1_off + hidden;
        let b2_off = w2_off + o * hidden;
        for j in 0..hidden {
            let a = w[b1_off + j] + linalg::dot(&w[j * d..(j + 1) * d], x);
            s.hidden[j] = a.tanh();
        }
        for oi in 0..o {
            s.out[oi] = w[b2_off + oi] + linalg::dot(&w[w2_off + oi * hidden..w2_off + (oi + 1) * hidden], &s.hidden);
        }
    }

    /// Turns the forward output into `output - target` in place.
    fn mlp_residual(&self, i: usize, s: &mut Scratch) {
        match self.dataset.targets() {
            Targets::Real(b) => s.out[0] -= b[i],
            Targets::Labels { labels, .. } => s.out[labels[i]] -= 1.0,
        }
    }
}

struct Scratch {
    out: Vec<f64>,
    hidden: Vec<f64>,
}

impl Scratch {
    fn new(p: &Problem) -> Self {
        let hidden = match p.kind {
            ProblemKind::Mlp { hidden } => hidden,
            _ => 0,
        };
        Self {
            out: vec![0.0; p.outputs],
            hidden: vec![0.0; hidden],
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient, one coordinate at a time.
pub fn finite_diff_grad(problem: &Problem, w: &[f64], batch: &[usize], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", "step must be positive"));
    }
    problem.check_inputs(w, batch)?;
    let mut probe = w.to_vec();
    let mut g = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        probe[j] = w[j] + h;
        let up = problem.loss(&probe, batch)?;
        probe[j] = w[j] - h;
        let down = problem.loss(&probe, batch)?;
        probe[j] = w[j];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

/// Minimizer of the full-data least-squares loss with ridge `mu`:
/// `w* = (A^T A / n + mu I)^{-1} A^T b / n`.
pub fn solve_least_squares_exact(dataset: &Dataset, mu: f64) -> Result<Vec<f64>> {
    let Targets::Real(b) = dataset.targets() else {
        return Err(Error::invalid("targets", "least squares needs real targets"));
    };
    let n = dataset.len();
    let d = dataset.dim();
    let a = DMatrix::from_row_slice(n, d, dataset.features());
    let mut gram = a.transpose() * &a / n as f64;
    for j in 0..d {
        gram[(j, j)] += mu;
    }
    let rhs = a.transpose() * nalgebra::DVector::from_column_slice(b) / n as f64;
    // Reject numerically singular systems instead of returning garbage.
    let eig_max = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = gram.clone().cholesky().ok_or(Error::SingularNormalEquations)?;
    let l_diag_min = chol.l_dirty().diagonal().min();
    if l_diag_min * l_diag_min <= 1e-13 * eig_max {
        return Err(Error::SingularNormalEquations);
    }
    let w = chol.solve(&rhs);
    Ok(w.iter().copied().collect())
}
