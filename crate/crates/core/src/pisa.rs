//! The consensus loop: server aggregation, per-client inexact local steps,
//! dual updates and the gated `sigma` schedule.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, MetricsRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::partition::Partition;
use crate::preconditioners::{Preconditioner, PreconditionerKind, PreconditionerState, Prepared};
use crate::problems::Problem;

/// Lower end of the decay-factor range the convergence analysis assumes.
pub const THEORY_GAMMA_MIN: f64 = 0.75;

/// Number of iterations between `sigma` increases so that `gamma^(1/k0)`
/// roughly matches a per-iteration factor of 0.99.
pub fn compute_k0(gamma: f64) -> Result<u64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::GammaOutOfRange(gamma));
    }
    let ratio = gamma.ln() / 0.99f64.ln();
    // ln(0.99)/ln(0.99) must not become 1.0000000000000002 and round up.
    let nearest = ratio.round();
    let k = if (ratio - nearest).abs() < 1e-9 { nearest } else { ratio.ceil() };
    Ok((k as u64).max(1))
}

/// Per-client step-size parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientParams {
    pub sigma0: f64,
    pub gamma: f64,
    pub rho: f64,
    pub eta: f64,
    /// `None` derives it from `gamma` via [`compute_k0`].
    pub k0: Option<u64>,
}

impl ClientParams {
    pub fn validate(&self, theory: bool) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid("sigma0", "must be positive and finite"));
        }
        check_gamma(self.gamma, theory)?;
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho", "must be positive and finite"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta", "must be positive and finite"));
        }
        if self.k0 == Some(0) {
            return Err(Error::invalid("k0", "must be at least 1"));
        }
        Ok(())
    }

    fn resolved_k0(&self) -> Result<u64> {
        match self.k0 {
            Some(k) => Ok(k),
            None if self.gamma == 1.0 => Ok(1),
            None => compute_k0(self.gamma),
        }
    }
}

/// `gamma = 1` freezes the schedule; the analysis needs `[3/4, 1)`.
fn check_gamma(gamma: f64, theory: bool) -> Result<()> {
    let ok = if theory {
        (THEORY_GAMMA_MIN..1.0).contains(&gamma)
    } else {
        gamma > 0.0 && gamma <= 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(Error::GammaOutOfRange(gamma))
    }
}

/// Uniform mini-batches drawn without replacement from one shard.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    shard: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `stream` separates clients sharing a seed.
    pub fn new(shard: Vec<usize>, batch_size: Option<usize>, seed: u64, stream: u64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let batch_size = batch_size.unwrap_or(shard.len()).min(shard.len());
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self { shard, batch_size, rng })
    }

    pub fn shard(&self) -> &[usize] {
        &self.shard
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch_size == self.shard.len()
    }

    pub fn draw(&mut self) -> Vec<usize> {
        if self.is_full_batch() {
            return self.shard.clone();
        }
        let mut picks = index::sample(&mut self.rng, self.shard.len(), self.batch_size).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| self.shard[k]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub w: Vec<f64>,
    pub pi: Vec<f64>,
    pub sigma: f64,
    pub sigma0: f64,
    pub gamma: f64,
    pub rho: f64,
    pub eta: f64,
    pub k0: u64,
    pub precond: PreconditionerState,
    /// Number of completed local steps.
    pub step: u64,
    pub sampler: BatchSampler,
    /// Metric used by the last local step; `None` for closed-form steps.
    pub last_q: Option<Preconditioner>,
    pub last_grad: Vec<f64>,
    theory: bool,
}

impl ClientState {
    pub fn new(
        params: &ClientParams,
        kind: PreconditionerKind,
        w0: &[f64],
        sampler: BatchSampler,
        theory: bool,
    ) -> Result<Self> {
        params.validate(theory)?;
        let p = w0.len();
        Ok(Self {
            w: w0.to_vec(),
            pi: vec![0.0; p],
            sigma: params.sigma0,
            sigma0: params.sigma0,
            gamma: params.gamma,
            rho: params.rho,
            eta: params.eta,
            k0: params.resolved_k0()?,
            precond: PreconditionerState::new(kind, params.eta, p)?,
            step: 0,
            sampler,
            last_q: None,
            last_grad: vec![0.0; p],
            theory,
        })
    }

    pub fn shard(&self) -> &[usize] {
        self.sampler.shard()
    }

    /// `rho Q (w_i - w)` for the last step, using `w` from the same iteration.
    pub fn rho_q_gap(&self, w: &[f64]) -> Vec<f64> {
        match &self.last_q {
            Some(q) => {
                let gap: Vec<f64> = self.w.iter().zip(w).map(|(a, b)| a - b).collect();
                q.apply(&gap).into_iter().map(|x| self.rho * x).collect()
            }
            // First-order optimality of the local step: pi + g + rho Q gap = 0.
            None => self.pi.iter().zip(&self.last_grad).map(|(p, g)| -(p + g)).collect(),
        }
    }

    /// One client pass given the broadcast `w_new`; returns the batch size used.
    fn advance(&mut self, problem: &Problem, w_new: &[f64]) -> Result<usize> {
        let batch = self.sampler.draw();
        let g = problem.grad(w_new, &batch)?;
        let h = if self.precond.kind.needs_hessian() {
            Some(problem.hessian(w_new, &batch)?)
        } else {
            None
        };
        let prepared = self.precond.prepare(&self.pi, &g, h.as_ref(), problem.layout(), self.step + 1)?;
        if let Prepared::Metric(q) = &prepared {
            debug_assert!(
                q.within_bounds(self.eta, 1e-9 * (1.0 + self.eta)),
                "preconditioner violates its spectral bound"
            );
        }
        sigma_advance(self)?;
        match prepared {
            Prepared::Metric(q) => {
                client_local_step(self, w_new, &g, &q)?;
                self.last_q = Some(q);
            }
            closed => {
                let s = closed.step(&self.pi, &g, self.sigma, self.rho)?;
                apply_step(self, w_new, &s);
                self.last_q = None;
            }
        }
        self.last_grad = g;
        if !linalg::all_finite(&self.w) || !linalg::all_finite(&self.pi) {
            return Err(Error::NumericalOverflow);
        }
        Ok(batch.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w: Vec<f64>,
    pub lambda: f64,
    pub alpha: Vec<f64>,
    pub ell: usize,
}

/// `[sum_i alpha_i (sigma_i w_i + pi_i)] / [sum_i alpha_i sigma_i + lambda]`
/// with each client's current `sigma_i`.
pub fn server_aggregate(clients: &[ClientState], alpha: &[f64], lambda: f64) -> Vec<f64> {
    debug_assert_eq!(clients.len(), alpha.len());
    let p = clients.first().map_or(0, |c| c.w.len());
    let mut num = vec![0.0; p];
    let mut den = lambda;
    for (c, &a) in clients.iter().zip(alpha) {
        den += a * c.sigma;
        for ((n, w), pi) in num.iter_mut().zip(&c.w).zip(&c.pi) {
            *n += a * (c.sigma * w + pi);
        }
    }
    num.iter().map(|n| n / den).collect()
}

/// Counts one step and divides `sigma` by `gamma` on multiples of `k0`.
pub fn sigma_advance(client: &mut ClientState) -> Result<f64> {
    check_gamma(client.gamma, client.theory)?;
    if client.k0 == 0 {
        return Err(Error::invalid("k0", "must be at least 1"));
    }
    client.step += 1;
    if client.step.is_multiple_of(client.k0) {
        client.sigma /= client.gamma;
    }
    Ok(client.sigma)
}

/// `w_i = w - (sigma I + rho Q)^{-1} (pi + g)`, then `pi += sigma (w_i - w)`.
pub fn client_local_step(client: &mut ClientState, w_new: &[f64], g: &[f64], q: &Preconditioner) -> Result<()> {
    let rhs: Vec<f64> = client.pi.iter().zip(g).map(|(a, b)| a + b).collect();
    let s = q.solve_shifted(client.sigma, client.rho, &rhs)?;
    apply_step(client, w_new, &s);
    Ok(())
}

fn apply_step(client: &mut ClientState, w_new: &[f64], s: &[f64]) {
    for j in 0..s.len() {
        client.w[j] = w_new[j] - s[j];
        client.pi[j] -= client.sigma * s[j];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PisaConfig {
    /// One entry per client.
    pub clients: Vec<ClientParams>,
    pub preconditioner: PreconditionerKind,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub max_iters: usize,
    pub stationarity_tol: Option<f64>,
    pub consensus_tol: Option<f64>,
    /// Stop once this many per-sample gradients have been evaluated.
    pub grad_budget: Option<u64>,
    pub seed: u64,
    /// 0 uses the ambient rayon pool.
    pub workers: usize,
    pub log_every: usize,
    pub warm_start: Option<Vec<f64>>,
    /// Keep the merit value and descent bound of every iteration.
    pub track_descent: bool,
    pub keep_iterates: bool,
    pub theory_mode: bool,
    pub record_wallclock: bool,
}

impl PisaConfig {
    pub fn uniform(m: usize, params: ClientParams, preconditioner: PreconditionerKind) -> Self {
        Self {
            clients: vec![params; m],
            preconditioner,
            batch_size: None,
            max_iters: 100,
            stationarity_tol: None,
            consensus_tol: None,
            grad_budget: None,
            seed: 0,
            workers: 0,
            log_every: 1,
            warm_start: None,
            track_descent: false,
            keep_iterates: false,
            theory_mode: false,
            record_wallclock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    /// Iteration or gradient budget exhausted with no tolerance configured.
    Completed,
    /// A stopping tolerance was met.
    Converged,
    /// Tolerances were configured but the budget ran out first.
    ToleranceNotMet,
    Diverged { iter: usize, reason: String },
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub records: Vec<MetricsRecord>,
    pub status: Option<RunStatus>,
    pub final_w: Vec<f64>,
    pub iterations: usize,
    pub grad_evals: u64,
    /// Merit value at every iteration (when tracked).
    pub merits: Vec<f64>,
    /// Required decrease from iteration `l` to `l + 1` (when tracked).
    pub descent_rhs: Vec<f64>,
    pub iterates: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn status(&self) -> &RunStatus {
        self.status.as_ref().unwrap_or(&RunStatus::Completed)
    }
}

/// A running instance of the algorithm.
pub struct Pisa<'a> {
    problem: &'a Problem,
    server: ServerState,
    clients: Vec<ClientState>,
    config: PisaConfig,
    pool: Option<rayon::ThreadPool>,
    grad_evals: u64,
    started: Instant,
}

impl<'a> Pisa<'a> {
    pub fn new(problem: &'a Problem, partition: &Partition, config: PisaConfig) -> Result<Self> {
        let n = problem.dataset().len();
        partition.validate(n)?;
        let m = partition.clients();
        if config.clients.len() != m {
            return Err(Error::invalid(
                "clients",
                format!("{} parameter sets for {m} clients", config.clients.len()),
            ));
        }
        if config.log_every == 0 {
            return Err(Error::invalid("log_every", "must be at least 1"));
        }
        if config.batch_size == Some(0) {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        let p = problem.num_params();
        let w0 = match &config.warm_start {
            Some(w) => {
                problem.layout().check(w)?;
                w.clone()
            }
            None => vec![0.0; p],
        };
        let clients = partition
            .shards
            .iter()
            .zip(&config.clients)
            .enumerate()
            .map(|(i, (shard, params))| {
                let sampler = BatchSampler::new(shard.clone(), config.batch_size, config.seed, i as u64 + 1)?;
                ClientState::new(params, config.preconditioner.clone(), &w0, sampler, config.theory_mode)
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = if config.workers > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::invalid("workers", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            problem,
            server: ServerState {
                w: w0,
                lambda: problem.lambda(),
                alpha: partition.alpha.clone(),
                ell: 0,
            },
            clients,
            config,
            pool,
            grad_evals: 0,
            started: Instant::now(),
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    /// Performs one iteration and returns the right-hand side of the descent bound.
    pub fn iterate(&mut self) -> Result<f64> {
        let next = self.server.ell + 1;
        let w_new = server_aggregate(&self.clients, &self.server.alpha, self.server.lambda);
        if !linalg::all_finite(&w_new) {
            return Err(Error::Divergence(next));
        }

        let lambda = self.server.lambda;
        let step_w = linalg::norm_sq(&linalg_sub(&w_new, &self.server.w));
        let mut rhs = 0.0;
        let prev: Vec<(f64, Vec<f64>)> = if self.config.track_descent {
            self.clients.iter().map(|c| (c.sigma, c.w.clone())).collect()
        } else {
            Vec::new()
        };

        let problem = self.problem;
        let w_ref = &w_new;
        let work = |clients: &mut [ClientState]| -> Vec<Result<usize>> {
            clients.par_iter_mut().map(|c| c.advance(problem, w_ref)).collect()
        };
        let results = match (&self.pool, self.config.workers) {
            (_, 1) => self.clients.iter_mut().map(|c| c.advance(problem, w_ref)).collect(),
            (Some(pool), _) => pool.install(|| work(&mut self.clients)),
            (None, _) => work(&mut self.clients),
        };
        for r in results {
            match r {
                Ok(b) => self.grad_evals += b as u64,
                Err(Error::NumericalOverflow) | Err(Error::LocalSolveFailed) => {
                    return Err(Error::Divergence(next))
                }
                Err(e) => return Err(e),
            }
        }

        if self.config.track_descent {
            for ((c, a), (sigma_prev, w_prev)) in self.clients.iter().zip(&self.server.alpha).zip(&prev) {
                let dwi = linalg::norm_sq(&linalg_sub(&c.w, w_prev));
                rhs += a * ((sigma_prev + 2.0 * lambda) / 4.0 * step_w + sigma_prev / 4.0 * dwi);
            }
        }
        self.server.w = w_new;
        self.server.ell = next;
        Ok(rhs)
    }

    /// Diagnostics at the current state.
    pub fn snapshot(&self) -> Result<MetricsRecord> {
        let problem = self.problem;
        let merit = match diagnostics::merit_function(&self.server, &self.clients, problem) {
            Ok(v) => Some(v),
            Err(Error::MeritUndefined) => None,
            Err(e) => return Err(e),
        };
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("grad_evals".to_string(), self.grad_evals as f64);
        Ok(MetricsRecord {
            iter: self.server.ell,
            loss: diagnostics::objective(problem, &self.server.w)?,
            lagrangian: diagnostics::augmented_lagrangian(&self.server, &self.clients, problem)?,
            merit,
            consensus_gap: diagnostics::consensus_gap(&self.server, &self.clients),
            stationarity: diagnostics::stationarity_residual(problem, &self.server.w)?,
            sigma_min: self.clients.iter().map(|c| c.sigma).fold(f64::INFINITY, f64::min),
            wallclock_s: self
                .config
                .record_wallclock
                .then(|| self.started.elapsed().as_secs_f64()),
            extra,
        })
    }

    /// Runs to completion. The observer sees every logged record and may add
    /// entries to `extra`.
    pub fn run_with(mut self, observer: &mut dyn FnMut(&mut MetricsRecord, &[f64])) -> Result<Trajectory> {
        self.started = Instant::now();
        let mut traj = Trajectory::default();
        let has_tol = self.config.stationarity_tol.is_some() || self.config.consensus_tol.is_some();
        let needs_merit = self.config.track_descent;

        let mut rec = self.snapshot()?;
        observer(&mut rec, &self.server.w);
        if needs_merit {
            traj.merits.push(diagnostics::merit_function(&self.server, &self.clients, self.problem)?);
        }
        if self.config.keep_iterates {
            traj.iterates.push(self.server.w.clone());
        }
        let mut converged = self.tolerance_met(&rec)?;
        traj.records.push(rec);

        let mut status = None;
        while !converged && self.server.ell < self.config.max_iters {
            if self.config.grad_budget.is_some_and(|b| self.grad_evals >= b) {
                break;
            }
            match self.iterate() {
                Ok(rhs) => {
                    if needs_merit {
                        traj.descent_rhs.push(rhs);
                        traj.merits
                            .push(diagnostics::merit_function(&self.server, &self.clients, self.problem)?);
                    }
                }
                Err(Error::Divergence(iter)) => {
                    status = Some(RunStatus::Diverged {
                        iter,
                        reason: Error::Divergence(iter).to_string(),
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
            if self.config.keep_iterates {
                traj.iterates.push(self.server.w.clone());
            }
            let ell = self.server.ell;
            let at_end = ell >= self.config.max_iters
                || self.config.grad_budget.is_some_and(|b| self.grad_evals >= b);
            let check_tol = has_tol;
            if ell.is_multiple_of(self.config.log_every) || at_end || check_tol {
                let mut rec = self.snapshot()?;
                converged = self.tolerance_met(&rec)?;
                if ell.is_multiple_of(self.config.log_every) || at_end || converged {
                    observer(&mut rec, &self.server.w);
                    traj.records.push(rec);
                }
            }
        }
        let status = status.unwrap_or(if converged {
            RunStatus::Converged
        } else if has_tol {
            RunStatus::ToleranceNotMet
        } else {
            RunStatus::Completed
        });
        traj.status = Some(status);
        traj.iterations = self.server.ell;
        traj.grad_evals = self.grad_evals;
        traj.final_w = self.server.w;
        Ok(traj)
    }

    pub fn run(self) -> Result<Trajectory> {
        self.run_with(&mut |_, _| {})
    }

    fn tolerance_met(&self, rec: &MetricsRecord) -> Result<bool> {
        let stat = self.config.stationarity_tol.is_some_and(|t| rec.stationarity <= t);
        let cons = self.config.consensus_tol.is_some_and(|t| rec.consensus_gap <= t);
        Ok(stat || cons)
    }
}

fn linalg_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Convenience wrapper: build and run.
pub fn run(problem: &Problem, partition: &Partition, config: PisaConfig) -> Result<Trajectory> {
    Pisa::new(problem, partition, config)?.run()
}
