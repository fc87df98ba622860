//! Monte Carlo check of the optimal cost, with a paired run at half the step size.
//!
//! cargo run --release --example monte_carlo

use mjlq::linalg::Vector;
use mjlq::mcsim::{self, SimulationConfig};
use mjlq::{model, riccati, CareOptions};

fn main() -> mjlq::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/scalar_regimes.json");
    let problem = model::load_problem(path)?;
    let care = riccati::solve_care(&problem, &CareOptions::default())?;

    let config = SimulationConfig::new(Vector::from_element(1, 1.0), 0)
        .with_paths(20_000)
        .with_horizon(10.0)
        .with_dt(2e-3)
        .with_seed(42);
    let pair = mcsim::simulate_dt_halving(&problem, &care.theta, &config)?;

    println!("value <P(0) x, x> = {:.6}", care.p[0][(0, 0)]);
    for (name, run) in [("dt", &pair.coarse), ("dt/2", &pair.fine)] {
        println!(
            "{name:>5}: cost {:.6} +/- {:.6}, diverged {}, decay {}",
            run.cost_mean,
            run.cost_stderr,
            run.n_paths_diverged,
            mcsim::check_decay(run)
        );
    }
    println!("paired shift {:.2e} +/- {:.1e}", pair.shift_mean, pair.shift_stderr);
    for point in pair.fine.second_moment_trace.iter().step_by(3) {
        println!("  E|X({:.1})|^2 = {:.3e}", point.t, point.mean);
    }
    Ok(())
}
