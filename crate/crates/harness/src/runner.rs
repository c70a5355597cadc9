//! Builds problems from a config, runs them, and writes metric streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pisa_core::baselines::{adam_step, sgd_momentum_step, BaselineKind, BaselineState, FedAvg};
use pisa_core::diagnostics::{self, MetricsRecord};
use pisa_core::partition::{partition_iid, partition_label_skew, partition_quantity_skew};
use pisa_core::pisa::{Pisa, PisaConfig, RunStatus, Trajectory};
use pisa_core::problems::{self, idx, BlobSpec, Dataset, Problem, ProblemKind};
use pisa_core::{linalg, Partition};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AlgorithmKind, PartitionMode, ProblemKindName, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] pisa_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("summary: {0}")]
    Csv(#[from] csv::Error),
}

/// One line of the JSONL metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum StreamRecord {
    Start {
        schema_version: u32,
        name: String,
        config_hash: String,
        sigma0: Vec<f64>,
        theory_floor: Option<f64>,
    },
    Iter {
        schema_version: u32,
        #[serde(flatten)]
        record: MetricsRecord,
    },
    End {
        schema_version: u32,
        status: String,
        iterations: usize,
        grad_evals: u64,
    },
    Abort {
        schema_version: u32,
        iter: usize,
        reason: String,
    },
}

pub fn parse_record_line(line: &str) -> Result<StreamRecord, serde_json::Error> {
    serde_json::from_str(line)
}

/// Hash of the run-defining fields (output location and worker count excluded).
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.run.out_dir = PathBuf::new();
    c.run.workers = 0;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Everything a run needs besides its hyperparameters.
pub struct Setup {
    pub problem: Problem,
    pub partition: Partition,
    pub test: Option<Dataset>,
    /// Optimal objective value, when known in closed form.
    pub f_star: Option<f64>,
}

pub fn build_setup(cfg: &RunConfig) -> Result<Setup, RunError> {
    let p = &cfg.problem;
    let (dataset, test) = match p.kind {
        ProblemKindName::LeastSquares => {
            let (ds, _) = problems::gen_least_squares_scaled(p.seed, p.d, p.n, p.noise, p.feature_scale)?;
            (ds, None)
        }
        _ => match (&p.idx_images, &p.idx_labels) {
            (Some(images), Some(labels)) => {
                let train = idx::load_digits(images, labels, Some(p.n))?;
                let test = match (&p.idx_test_images, &p.idx_test_labels) {
                    (Some(ti), Some(tl)) => Some(idx::load_digits(ti, tl, None)?),
                    _ => None,
                };
                (train, test)
            }
            _ => {
                let spec = BlobSpec {
                    classes: p.classes,
                    dim: p.d,
                    train_per_class: (p.n / p.classes).max(1),
                    test_per_class: p.test_per_class.max(1),
                    separation: p.separation,
                };
                let (train, test) = problems::gen_blobs(p.seed, &spec)?;
                (train, Some(test))
            }
        },
    };
    let kind = match p.kind {
        ProblemKindName::LeastSquares => ProblemKind::LeastSquares,
        ProblemKindName::MultinomialLogistic => ProblemKind::MultinomialLogistic,
        ProblemKindName::Mlp => ProblemKind::Mlp { hidden: p.hidden },
    };
    let f_star = if kind == ProblemKind::LeastSquares {
        problems::solve_least_squares_exact(&dataset, p.mu).ok()
    } else {
        None
    };
    let problem = Problem::new(kind, dataset, p.mu, p.lambda)?;
    let f_star = match f_star {
        Some(w) => Some(diagnostics::objective(&problem, &w)?),
        None => None,
    };
    let q = &cfg.partition;
    let ds = problem.dataset();
    let partition = match q.mode {
        PartitionMode::Iid => partition_iid(ds, q.m, q.seed)?,
        PartitionMode::LabelSkew => partition_label_skew(ds, q.m, q.s, q.seed)?,
        PartitionMode::QuantitySkew => partition_quantity_skew(ds, q.m, q.ratio, q.seed)?,
    };
    Ok(Setup {
        problem,
        partition,
        test,
        f_star,
    })
}

/// `(F - F*) / F*`, or the absolute gap when `F*` is zero.
pub fn relative_gap(f: f64, f_star: f64) -> f64 {
    if f_star.abs() > 0.0 {
        (f - f_star) / f_star.abs()
    } else {
        f - f_star
    }
}

fn annotate(setup: &Setup, rec: &mut MetricsRecord, w: &[f64]) {
    if let Some(fs) = setup.f_star {
        rec.extra.insert("rel_gap".into(), relative_gap(rec.loss, fs));
    }
    if let Some(acc) = setup.problem.accuracy(w, setup.problem.dataset()) {
        rec.extra.insert("train_accuracy".into(), acc);
    }
    if let Some(acc) = setup.test.as_ref().and_then(|t| setup.problem.accuracy(w, t)) {
        rec.extra.insert("test_accuracy".into(), acc);
    }
}

/// Summary CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub algorithm: String,
    pub status: String,
    pub iterations: usize,
    pub grad_evals: u64,
    pub final_loss: f64,
    pub final_gap: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub stationarity: f64,
    pub test_accuracy: Option<f64>,
    pub wallclock_s: f64,
}

pub struct RunOutput {
    pub summary: SummaryRow,
    pub trajectory: Trajectory,
    pub theory_floor: Option<f64>,
}

impl RunOutput {
    pub fn status(&self) -> &RunStatus {
        self.trajectory.status()
    }
}

fn status_name(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Completed => "completed",
        RunStatus::Converged => "converged",
        RunStatus::ToleranceNotMet => "tolerance-not-met",
        RunStatus::Diverged { .. } => "diverged",
    }
}

fn write_line(sink: &mut dyn Write, rec: &StreamRecord) -> Result<(), RunError> {
    serde_json::to_writer(&mut *sink, rec)?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Runs one (already expanded) configuration, streaming JSONL into `sink`.
pub fn execute(cfg: &RunConfig, sink: &mut dyn Write) -> Result<RunOutput, RunError> {
    let started = Instant::now();
    let setup = build_setup(cfg)?;
    let hash = config_hash(cfg);
    let mut params = cfg.client_params();
    let mut theory_floor = None;
    if cfg.run.theory_mode {
        let rho: Vec<f64> = params.iter().map(|c| c.rho).collect();
        let eta: Vec<f64> = params.iter().map(|c| c.eta).collect();
        let gamma_max = params.iter().map(|c| c.gamma).fold(0.0, f64::max);
        let bounds = diagnostics::estimate_theory_bounds(
            &setup.problem,
            &setup.partition,
            gamma_max,
            cfg.run.theory_sigma,
            &rho,
            &eta,
            cfg.algorithm.batch_size,
            cfg.run.seed,
        )?;
        for c in &mut params {
            c.sigma0 = c.sigma0.max(bounds.sigma0_floor);
        }
        theory_floor = Some(bounds.sigma0_floor);
    }
    write_line(
        sink,
        &StreamRecord::Start {
            schema_version: SCHEMA_VERSION,
            name: cfg.run.name.clone(),
            config_hash: hash.clone(),
            sigma0: params.iter().map(|c| c.sigma0).collect(),
            theory_floor,
        },
    )?;

    let mut io_err = None;
    let mut emit = |rec: &mut MetricsRecord, w: &[f64], sink: &mut dyn Write| {
        annotate(&setup, rec, w);
        if io_err.is_none() {
            let line = StreamRecord::Iter {
                schema_version: SCHEMA_VERSION,
                record: rec.clone(),
            };
            if let Err(e) = write_line(sink, &line) {
                io_err = Some(e);
            }
        }
    };

    let trajectory = if cfg.algorithm.kind.is_baseline() {
        run_baseline(cfg, &setup, &mut |r, w| emit(r, w, sink))?
    } else {
        let pcfg = PisaConfig {
            clients: params,
            preconditioner: cfg.preconditioner(),
            batch_size: cfg.algorithm.batch_size,
            max_iters: cfg.run.max_iters,
            stationarity_tol: cfg.run.stationarity_tol,
            consensus_tol: cfg.run.consensus_tol,
            grad_budget: cfg.run.grad_budget,
            seed: cfg.run.seed,
            workers: cfg.run.workers,
            log_every: cfg.run.log_every,
            warm_start: cfg.run.warm_start.clone(),
            track_descent: cfg.run.track_descent,
            keep_iterates: cfg.run.track_descent,
            theory_mode: cfg.run.theory_mode,
            record_wallclock: cfg.run.record_wallclock,
        };
        Pisa::new(&setup.problem, &setup.partition, pcfg)?.run_with(&mut |r, w| emit(r, w, sink))?
    };
    if let Some(e) = io_err {
        return Err(e);
    }

    let status = trajectory.status().clone();
    let end = match &status {
        RunStatus::Diverged { iter, reason } => StreamRecord::Abort {
            schema_version: SCHEMA_VERSION,
            iter: *iter,
            reason: reason.clone(),
        },
        s => StreamRecord::End {
            schema_version: SCHEMA_VERSION,
            status: status_name(s).into(),
            iterations: trajectory.iterations,
            grad_evals: trajectory.grad_evals,
        },
    };
    write_line(sink, &end)?;
    sink.flush()?;

    let last = trajectory.records.last().cloned();
    let summary = SummaryRow {
        schema_version: SCHEMA_VERSION,
        name: cfg.run.name.clone(),
        config_hash: hash,
        algorithm: serde_json::to_value(cfg.algorithm.kind)?.as_str().unwrap_or("").to_string(),
        status: status_name(&status).into(),
        iterations: trajectory.iterations,
        grad_evals: trajectory.grad_evals,
        final_loss: last.as_ref().map_or(f64::NAN, |r| r.loss),
        final_gap: last.as_ref().and_then(|r| r.extra.get("rel_gap").copied()),
        gamma_hat: fitted_rate(&trajectory.records, cfg.run.log_every),
        stationarity: last.as_ref().map_or(f64::NAN, |r| r.stationarity),
        test_accuracy: last.as_ref().and_then(|r| r.extra.get("test_accuracy").copied()),
        wallclock_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        summary,
        trajectory,
        theory_floor,
    })
}

/// Per-iteration rate of the stationarity residual over the regularly spaced
/// records, ignoring the floating-point floor.
fn fitted_rate(records: &[MetricsRecord], log_every: usize) -> Option<f64> {
    let first = records.first()?.stationarity;
    let series: Vec<f64> = records
        .iter()
        .filter(|r| r.iter % log_every == 0)
        .map(|r| r.stationarity)
        .take_while(|&s| s > 1e-13 * first.max(1e-300))
        .collect();
    let rate = diagnostics::fit_linear_rate(&series, 0.5).ok()?;
    Some(rate.powf(1.0 / log_every as f64))
}

fn baseline_record(setup: &Setup, iter: usize, w: &[f64], grad_evals: u64) -> Result<MetricsRecord, RunError> {
    let loss = diagnostics::objective(&setup.problem, w)?;
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("grad_evals".to_string(), grad_evals as f64);
    Ok(MetricsRecord {
        iter,
        loss,
        lagrangian: loss,
        merit: None,
        consensus_gap: 0.0,
        stationarity: diagnostics::stationarity_residual(&setup.problem, w)?,
        sigma_min: 0.0,
        wallclock_s: None,
        extra,
    })
}

/// Centralized SGD-M/Adam steps, or FedAvg rounds, under the same stopping rules.
fn run_baseline(
    cfg: &RunConfig,
    setup: &Setup,
    observer: &mut dyn FnMut(&mut MetricsRecord, &[f64]),
) -> Result<Trajectory, RunError> {
    let a = &cfg.algorithm;
    let problem = &setup.problem;
    let n = problem.dataset().len();
    let mut w = cfg.run.warm_start.clone().unwrap_or_else(|| vec![0.0; problem.num_params()]);
    problem.layout().check(&w)?;
    let kind = match a.kind {
        AlgorithmKind::SgdMomentum => BaselineKind::SgdMomentum,
        AlgorithmKind::Adam => BaselineKind::Adam,
        _ => BaselineKind::Fedavg,
    };
    let mut state = BaselineState::new(kind, a.lr, w.len())?;
    state.beta1 = a.beta1;
    state.beta2 = a.beta2;
    state.weight_decay = a.weight_decay;
    state.local_epochs = a.local_epochs;
    state.validate()?;
    let mut fedavg = FedAvg::new(setup.partition.clients(), a.lr, a.local_epochs, a.batch_size, cfg.run.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let bs = a.batch_size.unwrap_or(n).min(n);
    let all = problem.dataset().all_indices();

    let tol_set = cfg.run.stationarity_tol.is_some();
    let tol_met = |r: &MetricsRecord| cfg.run.stationarity_tol.is_some_and(|t| r.stationarity <= t);
    let mut traj = Trajectory::default();
    let mut evals = 0u64;
    let mut rec = baseline_record(setup, 0, &w, evals)?;
    observer(&mut rec, &w);
    let mut converged = tol_met(&rec);
    traj.records.push(rec);
    let mut iter = 0;
    let mut status = None;
    while !converged && iter < cfg.run.max_iters && cfg.run.grad_budget.is_none_or(|b| evals < b) {
        iter += 1;
        let step: Result<(), pisa_core::Error> = (|| {
            match kind {
                BaselineKind::Fedavg => {
                    w = fedavg.round(problem, &setup.partition, &w)?;
                    evals = fedavg.grad_evals;
                }
                _ => {
                    let batch: Vec<usize> = if bs == n {
                        all.clone()
                    } else {
                        let mut b = index::sample(&mut rng, n, bs).into_vec();
                        b.sort_unstable();
                        b
                    };
                    let mut g = problem.grad(&w, &batch)?;
                    linalg::axpy(problem.lambda(), &w, &mut g);
                    evals += batch.len() as u64;
                    if kind == BaselineKind::Adam {
                        adam_step(&mut state, &mut w, &g);
                    } else {
                        sgd_momentum_step(&mut state, &mut w, &g);
                    }
                }
            }
            if linalg::all_finite(&w) {
                Ok(())
            } else {
                Err(pisa_core::Error::NumericalOverflow)
            }
        })();
        if let Err(e) = step {
            let reason = pisa_core::Error::Divergence(iter).to_string();
            match e {
                pisa_core::Error::NumericalOverflow => {
                    status = Some(RunStatus::Diverged { iter, reason });
                    break;
                }
                other => return Err(other.into()),
            }
        }
        let at_end = iter >= cfg.run.max_iters || cfg.run.grad_budget.is_some_and(|b| evals >= b);
        if iter % cfg.run.log_every == 0 || at_end || tol_set {
            let mut rec = match baseline_record(setup, iter, &w, evals) {
                Ok(r) => r,
                Err(RunError::Core(pisa_core::Error::NumericalOverflow)) => {
                    let reason = pisa_core::Error::Divergence(iter).to_string();
                    status = Some(RunStatus::Diverged { iter, reason });
                    break;
                }
                Err(e) => return Err(e),
            };
            converged = tol_met(&rec);
            if iter % cfg.run.log_every == 0 || at_end || converged {
                observer(&mut rec, &w);
                traj.records.push(rec);
            }
        }
    }
    traj.status = Some(status.unwrap_or(if converged {
        RunStatus::Converged
    } else if tol_set {
        RunStatus::ToleranceNotMet
    } else {
        RunStatus::Completed
    }));
    traj.iterations = iter;
    traj.grad_evals = evals;
    traj.final_w = w;
    Ok(traj)
}

/// Runs every sweep point, writing `<out>/<name>.jsonl` and `<out>/summary.csv`.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<RunOutput>, RunError> {
    let dir = out_dir.map_or_else(|| cfg.run.out_dir.clone(), Path::to_path_buf);
    std::fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    for point in cfg.expand() {
        let file = File::create(dir.join(format!("{}.jsonl", point.run.name)))?;
        let mut sink = BufWriter::new(file);
        outputs.push(execute(&point, &mut sink)?);
    }
    let rows: Vec<SummaryRow> = outputs.iter().map(|o| o.summary.clone()).collect();
    emit_summary(&rows, File::create(dir.join("summary.csv"))?)?;
    Ok(outputs)
}

/// Process exit code for a batch of runs: 2 if any diverged, 3 if any missed
/// its tolerance, 0 otherwise.
pub fn exit_code(outputs: &[RunOutput]) -> i32 {
    if outputs.iter().any(|o| matches!(o.status(), RunStatus::Diverged { .. })) {
        2
    } else if outputs.iter().any(|o| *o.status() == RunStatus::ToleranceNotMet) {
        3
    } else {
        0
    }
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "schema_version",
    "name",
    "config_hash",
    "algorithm",
    "status",
    "iterations",
    "grad_evals",
    "final_loss",
    "final_gap",
    "gamma_hat",
    "stationarity",
    "test_accuracy",
    "wallclock_s",
];

pub fn emit_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum SummaryError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unexpected summary header")]
    Header,
    #[error("unsupported schema version {0}")]
    Version(u32),
}

pub fn read_summary<R: std::io::Read>(input: R) -> Result<Vec<SummaryRow>, SummaryError> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(SummaryError::Header);
    }
    let mut rows = Vec::new();
    for row in r.deserialize::<SummaryRow>() {
        let row = row?;
        if row.schema_version != SCHEMA_VERSION {
            return Err(SummaryError::Version(row.schema_version));
        }
        rows.push(row);
    }
    Ok(rows)
}
