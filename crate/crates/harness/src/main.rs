use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use pisa_core::diagnostics;
use pisa_harness::config::{load_layered, RunConfig};
use pisa_harness::runner::{self, build_setup, emit_summary, read_summary, run_experiment};

#[derive(Parser)]
#[command(name = "pisa", version, about = "Consensus ADMM experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configuration (all sweep points) and write JSONL streams plus summary.csv.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the client shards and weights as JSON.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Print the theory floor on the initial penalty and whether the config meets it.
    CheckTheory {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Concatenate summary CSVs matching a glob pattern.
    Summarize { pattern: String },
    /// List shipped presets.
    Presets,
}

fn load(config: Option<PathBuf>, preset: Option<String>) -> anyhow::Result<RunConfig> {
    if config.is_none() && preset.is_none() {
        bail!("pass --config, --preset, or both");
    }
    Ok(load_layered(config.as_deref(), preset.as_deref(), std::env::vars())?)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn real_main() -> anyhow::Result<u8> {
    match Cli::parse().cmd {
        Cmd::Run { config, preset, out } => {
            let cfg = load(config, preset)?;
            let outputs = run_experiment(&cfg, out.as_deref())?;
            for o in &outputs {
                let s = &o.summary;
                println!(
                    "{}: {} after {} iterations, loss {:.6e}, stationarity {:.3e}",
                    s.name, s.status, s.iterations, s.final_loss, s.stationarity
                );
            }
            Ok(runner::exit_code(&outputs) as u8)
        }
        Cmd::Partition { config, preset } => {
            let cfg = load(config, preset)?;
            let setup = build_setup(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&setup.partition)?);
            Ok(0)
        }
        Cmd::CheckTheory { config, preset } => {
            let cfg = load(config, preset)?;
            let setup = build_setup(&cfg)?;
            let params = cfg.client_params();
            let rho: Vec<f64> = params.iter().map(|c| c.rho).collect();
            let eta: Vec<f64> = params.iter().map(|c| c.eta).collect();
            let gamma_max = params.iter().map(|c| c.gamma).fold(0.0, f64::max);
            let b = diagnostics::estimate_theory_bounds(
                &setup.problem,
                &setup.partition,
                gamma_max,
                cfg.run.theory_sigma,
                &rho,
                &eta,
                cfg.algorithm.batch_size,
                cfg.run.seed,
            )
            .context("estimating theory bounds")?;
            let min_sigma0 = params.iter().map(|c| c.sigma0).fold(f64::INFINITY, f64::min);
            println!("delta_bar     {:.6e}", b.delta_bar);
            println!("max r_i       {:.6e}", b.r_i.iter().copied().fold(0.0, f64::max));
            println!("max eps_i     {:.6e}", b.eps_hat.iter().copied().fold(0.0, f64::max));
            println!("sigma0 floor  {:.6e}", b.sigma0_floor);
            println!("configured    {min_sigma0:.6e}");
            let ok = cfg.run.theory_mode || min_sigma0 >= b.sigma0_floor;
            let verdict = match (min_sigma0 >= b.sigma0_floor, cfg.run.theory_mode) {
                (true, _) => "yes",
                (false, true) => "yes (theory_mode raises sigma0 to the floor)",
                (false, false) => "no",
            };
            println!("meets floor   {verdict}");
            Ok(if ok { 0 } else { 3 })
        }
        Cmd::Summarize { pattern } => {
            let mut rows = Vec::new();
            for path in glob::glob(&pattern)? {
                let path = path?;
                let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                rows.extend(read_summary(file).with_context(|| format!("reading {}", path.display()))?);
            }
            emit_summary(&rows, std::io::stdout().lock())?;
            Ok(0)
        }
        Cmd::Presets => {
            for name in pisa_harness::presets::NAMES {
                println!("{name}");
            }
            Ok(0)
        }
    }
}
