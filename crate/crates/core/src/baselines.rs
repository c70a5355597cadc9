//! Reference optimizers: heavy-ball SGD, Adam and FedAvg.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::problems::Problem;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    SgdMomentum,
    Adam,
    Fedavg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub kind: BaselineKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub local_epochs: usize,
    pub velocity: Vec<f64>,
    pub second: Vec<f64>,
    pub t: u64,
}

impl BaselineState {
    pub fn new(kind: BaselineKind, lr: f64, p: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            local_epochs: 5,
            velocity: vec![0.0; p],
            second: vec![0.0; p],
            t: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) {
            return Err(Error::invalid("beta1", "must lie in [0, 1)"));
        }
        if !unit(self.beta2) {
            return Err(Error::invalid("beta2", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be nonnegative"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

fn decayed(state: &BaselineState, w: &[f64], g: &[f64]) -> Vec<f64> {
    g.iter().zip(w).map(|(g, w)| g + state.weight_decay * w).collect()
}

/// `v <- beta1 v + g; w <- w - lr v`
pub fn sgd_momentum_step(state: &mut BaselineState, w: &mut [f64], g: &[f64]) {
    let g = decayed(state, w, g);
    state.t += 1;
    for ((wi, vi), gi) in w.iter_mut().zip(state.velocity.iter_mut()).zip(&g) {
        *vi = state.beta1 * *vi + gi;
        *wi -= state.lr * *vi;
    }
}

pub fn adam_step(state: &mut BaselineState, w: &mut [f64], g: &[f64]) {
    let g = decayed(state, w, g);
    state.t += 1;
    let t = state.t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for j in 0..w.len() {
        state.velocity[j] = state.beta1 * state.velocity[j] + (1.0 - state.beta1) * g[j];
        state.second[j] = state.beta2 * state.second[j] + (1.0 - state.beta2) * g[j] * g[j];
        let mh = state.velocity[j] / c1;
        let vh = state.second[j] / c2;
        w[j] -= state.lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Local-SGD clients with weighted averaging.
#[derive(Debug, Clone)]
pub struct FedAvg {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: Option<usize>,
    rngs: Vec<ChaCha8Rng>,
    pub grad_evals: u64,
}

impl FedAvg {
    pub fn new(m: usize, lr: f64, local_epochs: usize, batch_size: Option<usize>, seed: u64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be at least 1"));
        }
        if batch_size == Some(0) {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        let rngs = (0..m)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64 + 1);
                r
            })
            .collect();
        Ok(Self {
            lr,
            local_epochs,
            batch_size,
            rngs,
            grad_evals: 0,
        })
    }

    /// Broadcast `w`, run local epochs on each shard, return `sum alpha_i w_i`.
    pub fn round(&mut self, problem: &Problem, partition: &Partition, w: &[f64]) -> Result<Vec<f64>> {
        if partition.clients() != self.rngs.len() {
            return Err(Error::invalid("partition", "client count changed"));
        }
        let (lr, epochs, bs) = (self.lr, self.local_epochs, self.batch_size);
        let locals: Vec<Result<(Vec<f64>, u64)>> = self
            .rngs
            .par_iter_mut()
            .zip(&partition.shards)
            .map(|(rng, shard)| local_sgd(problem, shard, w, lr, epochs, bs, rng))
            .collect();
        let mut out = vec![0.0; w.len()];
        for (res, a) in locals.into_iter().zip(&partition.alpha) {
            let (wi, evals) = res?;
            self.grad_evals += evals;
            for (o, x) in out.iter_mut().zip(&wi) {
                *o += a * x;
            }
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalOverflow);
        }
        Ok(out)
    }
}

fn local_sgd(
    problem: &Problem,
    shard: &[usize],
    w: &[f64],
    lr: f64,
    epochs: usize,
    batch_size: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, u64)> {
    let mut wi = w.to_vec();
    let bs = batch_size.unwrap_or(shard.len()).min(shard.len());
    let mut order = shard.to_vec();
    let mut evals = 0u64;
    for _ in 0..epochs {
        if bs < order.len() {
            order.shuffle(rng);
        }
        for batch in order.chunks(bs) {
            let g = problem.grad(&wi, batch)?;
            evals += batch.len() as u64;
            for (x, gj) in wi.iter_mut().zip(&g) {
                *x -= lr * gj;
            }
        }
    }
    Ok((wi, evals))
}

/// One FedAvg round with a fresh client stream.
pub fn fedavg_round(
    problem: &Problem,
    partition: &Partition,
    w: &[f64],
    local_epochs: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    FedAvg::new(partition.clients(), lr, local_epochs, None, 0)?.round(problem, partition, w)
}
