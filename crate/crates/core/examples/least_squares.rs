use pisa_core::diagnostics::stationarity_residual;
use pisa_core::partition::partition_iid;
use pisa_core::problems::gen_least_squares;
use pisa_core::{ClientParams, MomentScheme, PisaConfig, PreconditionerKind, Problem, ProblemKind};

fn main() -> pisa_core::Result<()> {
    let (data, _truth) = gen_least_squares(1, 20, 800, 0.1)?;
    let problem = Problem::new(ProblemKind::LeastSquares, data, 1e-3, 0.0)?;
    let partition = partition_iid(problem.dataset(), 8, 1)?;

    let params = ClientParams { sigma0: 4.0, gamma: 0.99, rho: 1.0, eta: 1e3, k0: None };
    let sisa = PreconditionerKind::Moment { scheme: MomentScheme::III, beta: 0.999 };
    let mut cfg = PisaConfig::uniform(partition.clients(), params, sisa);
    cfg.max_iters = 500;

    let traj = pisa_core::pisa::run(&problem, &partition, cfg)?;
    println!(
        "{:?} after {} iterations, stationarity {:.2e}",
        traj.status(),
        traj.iterations,
        stationarity_residual(&problem, &traj.final_w)?
    );
    Ok(())
}
