//! Solves the three-regime scalar example and checks the solution independently.
//!
//! cargo run --example solve

use mjlq::{model, riccati, synthesis, CareOptions};

fn main() -> mjlq::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/scalar_regimes.json");
    let problem = model::load_problem(path)?;

    let care = riccati::solve_care(&problem, &CareOptions::default())?;
    println!("stabilizer: {}", care.trace.stabilizer_source);
    println!("CDRE checkpoints: {}, Newton steps: {}", care.trace.checkpoints.len(), care.trace.newton_iterations);
    for i in 0..problem.regimes_count() {
        println!(
            "regime {i}: P = {:.8}  Theta = [{:.4}, {:.4}]  |E(P)| = {:.1e}  min eig N = {:.3}",
            care.p[i][(0, 0)],
            care.theta.theta[i][(0, 0)],
            care.theta.theta[i][(1, 0)],
            care.residuals[i],
            care.n_margins[i],
        );
    }

    // The verifier only sees P; it recomputes the residuals and the gains.
    let report = riccati::verify_care(&problem, &care.p, None)?;
    println!("verification: {}", if report.accepted { "accepted" } else { "rejected" });

    let strategy = synthesis::build_closed_loop(&problem, &care)?;
    let value = synthesis::value_function(&problem, &care, None)?;
    let x = mjlq::linalg::Vector::from_element(1, 1.0);
    println!("V(x = 1, i = 0) = {:.8}", value.evaluate(&x, 0));
    println!("offsets present: {}", strategy.has_offsets());
    Ok(())
}
