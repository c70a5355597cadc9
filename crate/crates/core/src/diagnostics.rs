//! Quantities from the convergence analysis, evaluated on live run state.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::partition::Partition;
use crate::pisa::{ClientState, ServerState};
use crate::problems::{solve_least_squares_exact, Problem, ProblemKind};

/// One logged iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    /// Global objective `F(w) + (lambda/2)||w||^2` at the server iterate.
    pub loss: f64,
    pub lagrangian: f64,
    /// Absent when some client runs a frozen schedule.
    pub merit: Option<f64>,
    pub consensus_gap: f64,
    pub stationarity: f64,
    pub sigma_min: f64,
    pub wallclock_s: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

/// Full objective with both ridge parts.
pub fn objective(problem: &Problem, w: &[f64]) -> Result<f64> {
    let all = problem.dataset().all_indices();
    Ok(problem.loss(w, &all)? + 0.5 * problem.lambda() * linalg::norm_sq(w))
}

pub fn augmented_lagrangian(server: &ServerState, clients: &[ClientState], problem: &Problem) -> Result<f64> {
    let mut total = 0.5 * server.lambda * linalg::norm_sq(&server.w);
    for (c, a) in clients.iter().zip(&server.alpha) {
        let gap: Vec<f64> = c.w.iter().zip(&server.w).map(|(x, y)| x - y).collect();
        let f = problem.loss(&c.w, c.shard())?;
        total += a * (f + linalg::dot(&c.pi, &gap) + 0.5 * c.sigma * linalg::norm_sq(&gap));
    }
    Ok(total)
}

/// Augmented Lagrangian plus the metric-gap and schedule correction terms.
pub fn merit_function(server: &ServerState, clients: &[ClientState], problem: &Problem) -> Result<f64> {
    if clients.iter().any(|c| c.gamma >= 1.0) {
        return Err(Error::MeritUndefined);
    }
    Ok(augmented_lagrangian(server, clients, problem)? + merit_excess(server, clients))
}

/// `merit - lagrangian`.
pub fn merit_excess(server: &ServerState, clients: &[ClientState]) -> f64 {
    clients
        .iter()
        .zip(&server.alpha)
        .map(|(c, a)| {
            let rq = linalg::norm_sq(&c.rho_q_gap(&server.w));
            let tail = c.gamma.powi(server.ell.min(i32::MAX as usize) as i32) / (16.0 * (1.0 - c.gamma));
            a * (8.0 / c.sigma * rq + tail)
        })
        .sum()
}

pub fn consensus_gap(server: &ServerState, clients: &[ClientState]) -> f64 {
    clients
        .iter()
        .map(|c| linalg::dist(&c.w, &server.w))
        .fold(0.0, f64::max)
}

/// `|| sum_i alpha_i grad F_i(w) + lambda w ||` with full batches.
pub fn stationarity_residual(problem: &Problem, w: &[f64]) -> Result<f64> {
    let all = problem.dataset().all_indices();
    let mut g = problem.grad(w, &all)?;
    linalg::axpy(problem.lambda(), w, &mut g);
    Ok(linalg::norm(&g))
}

/// Sampled lower estimate of `sup 64 ||grad F_i(w; B) - grad F_i(w; B')||^2`
/// over `||w|| <= radius` and batch pairs of the given size.
///
/// Each sampled `w` owns an independent stream, so raising `n_pairs` only
/// appends samples and the running max cannot decrease.
pub fn estimate_epsilon(
    problem: &Problem,
    shard: &[usize],
    radius: f64,
    batch_size: usize,
    n_w: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if n_w == 0 || n_pairs == 0 {
        return Err(Error::invalid("samples", "n_w and n_pairs must be at least 1"));
    }
    if shard.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    if batch_size >= shard.len() {
        return Ok(0.0);
    }
    let p = problem.num_params();
    let mut w_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for k in 0..n_w {
        let w = sample_ball(&mut w_rng, p, radius);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        for _ in 0..n_pairs {
            let b1: Vec<usize> = index::sample(&mut rng, shard.len(), batch_size).iter().map(|i| shard[i]).collect();
            let b2: Vec<usize> = index::sample(&mut rng, shard.len(), batch_size).iter().map(|i| shard[i]).collect();
            let g1 = problem.grad(&w, &b1)?;
            let g2 = problem.grad(&w, &b2)?;
            best = best.max(64.0 * linalg::norm_sq(&linalg_sub(&g1, &g2)));
        }
    }
    Ok(best)
}

fn sample_ball(rng: &mut ChaCha8Rng, p: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = linalg::norm(&v).max(f64::MIN_POSITIVE);
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / p.max(1) as f64);
    v.iter_mut().for_each(|x| *x *= r / n);
    v
}

fn linalg_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryBounds {
    /// Upper estimate of the radius containing every iterate.
    pub delta_bar: f64,
    pub sigma0_floor: f64,
    pub eps_hat: Vec<f64>,
    pub r_i: Vec<f64>,
}

/// `8 max{sigma, rho_i eta_i, r_i, delta^-2, eps_i}`.
pub fn theory_sigma0(bounds: &TheoryBounds, sigma: f64, rho: &[f64], eta: &[f64]) -> Result<f64> {
    if !(bounds.delta_bar > 0.0) {
        return Err(Error::invalid("delta_bar", "must be positive"));
    }
    let mut top = sigma.max(bounds.delta_bar.powi(-2));
    for (r, e) in rho.iter().zip(eta) {
        top = top.max(r * e);
    }
    for &x in bounds.r_i.iter().chain(&bounds.eps_hat) {
        top = top.max(x);
    }
    Ok(8.0 * top)
}

/// Radius bound on all iterates, taking 0 as the loss lower bound.
///
/// The server iterate stays in the sublevel set `{F_lambda <= C}` with
/// `C = F_lambda(w0) + 1/(1 - gamma_max)`; each client iterate stays within
/// `sqrt(2C / (sigma alpha_i))` of it.
pub fn delta_bar(problem: &Problem, partition: &Partition, w0: &[f64], gamma_max: f64, sigma: f64) -> Result<f64> {
    if !(gamma_max > 0.0 && gamma_max < 1.0) {
        return Err(Error::GammaOutOfRange(gamma_max));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", "must be positive"));
    }
    let c = objective(problem, w0)? + 1.0 / (1.0 - gamma_max);
    let server_radius = match problem.kind() {
        ProblemKind::LeastSquares => {
            let ds = problem.dataset();
            let (n, d) = (ds.len(), ds.dim());
            let a = DMatrix::from_row_slice(n, d, ds.features());
            let mut gram = a.transpose() * &a / n as f64;
            for i in 0..d {
                gram[(i, i)] += problem.mu();
            }
            let kappa = gram.symmetric_eigenvalues().min();
            if !(kappa > 0.0) {
                return Err(Error::SingularNormalEquations);
            }
            let w_star = solve_least_squares_exact(ds, problem.mu())?;
            // F_lambda(w) >= F* + (kappa/2)||w - w*||^2 and F* >= 0.
            linalg::norm(&w_star) + (2.0 * c / kappa).sqrt()
        }
        _ => {
            if !(problem.mu() > 0.0) {
                return Err(Error::invalid("mu", "radius bound needs mu > 0 for this problem kind"));
            }
            (2.0 * c / problem.mu()).sqrt()
        }
    };
    let alpha_min = partition.alpha.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(server_radius + (2.0 * c / (sigma * alpha_min)).sqrt())
}

/// Per-sample gradient Lipschitz bound for each client.
pub fn lipschitz(problem: &Problem, partition: &Partition, seed: u64) -> Result<Vec<f64>> {
    let ds = problem.dataset();
    let ridge = problem.local_ridge();
    partition
        .shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let sq = shard.iter().map(|&t| linalg::norm_sq(ds.row(t))).fold(0.0, f64::max);
            Ok(match problem.kind() {
                ProblemKind::LeastSquares => sq + ridge,
                // Softmax cross-entropy curvature in the logits is at most 1/2.
                ProblemKind::MultinomialLogistic => 0.5 * (sq + 1.0) + ridge,
                ProblemKind::Mlp { .. } => sampled_lipschitz(problem, shard, seed.wrapping_add(i as u64))?,
            })
        })
        .collect()
}

fn sampled_lipschitz(problem: &Problem, shard: &[usize], seed: u64) -> Result<f64> {
    let p = problem.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..32 {
        let w = sample_ball(&mut rng, p, 1.0);
        let dir = sample_ball(&mut rng, p, 1e-4);
        let w2: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let t = shard[rng.random_range(0..shard.len())];
        let g1 = problem.grad(&w, &[t])?;
        let g2 = problem.grad(&w2, &[t])?;
        let step = linalg::norm(&dir);
        if step > 0.0 {
            best = best.max(linalg::norm(&linalg_sub(&g1, &g2)) / step);
        }
    }
    Ok(best)
}

/// Everything needed to pick a provably safe initial `sigma`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_theory_bounds(
    problem: &Problem,
    partition: &Partition,
    gamma_max: f64,
    sigma: f64,
    rho: &[f64],
    eta: &[f64],
    batch_size: Option<usize>,
    seed: u64,
) -> Result<TheoryBounds> {
    let p = problem.num_params();
    let delta_bar = delta_bar(problem, partition, &vec![0.0; p], gamma_max, sigma)?;
    let r_i = lipschitz(problem, partition, seed)?;
    let eps_hat = partition
        .shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let b = batch_size.unwrap_or(shard.len());
            estimate_epsilon(problem, shard, 2.0 * delta_bar, b, 16, 16, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bounds = TheoryBounds {
        delta_bar,
        sigma0_floor: 0.0,
        eps_hat,
        r_i,
    };
    bounds.sigma0_floor = theory_sigma0(&bounds, sigma, rho, eta)?;
    Ok(bounds)
}

/// Counts steps where the merit decrease falls short of the required bound.
/// `rhs[l]` is the bound for the step from `merits[l]` to `merits[l + 1]`.
pub fn check_descent(merits: &[f64], rhs: &[f64]) -> usize {
    merits
        .windows(2)
        .zip(rhs)
        .filter(|(m, r)| {
            let tol = 1e-9 * (1.0 + m[0].abs());
            m[0] - m[1] < *r - tol
        })
        .count()
}

/// Geometric ratio fitted to the tail of a positive series (slope of the
/// log-linear least-squares fit, exponentiated).
pub fn fit_linear_rate(series: &[f64], tail_fraction: f64) -> Result<f64> {
    if series.len() < 10 {
        return Err(Error::invalid("series", "need at least 10 points"));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::invalid("tail_fraction", "must lie in (0, 1]"));
    }
    let k = ((series.len() as f64 * tail_fraction).ceil() as usize).clamp(2, series.len());
    let tail = &series[series.len() - k..];
    if tail.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::RateUndefined);
    }
    let n = k as f64;
    let xm = (n - 1.0) / 2.0;
    let logs: Vec<f64> = tail.iter().map(|x| x.ln()).collect();
    let ym = logs.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in logs.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    Ok((sxy / sxx).exp())
}
