//! Regime-constant offsets in the dynamics and cost: the stationary adjoint gives the
//! affine part of the feedback and of the value.
//!
//! cargo run --example offsets

use mjlq::linalg::Vector;
use mjlq::{model, riccati, synthesis, CareOptions};

fn main() -> mjlq::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/scalar_regimes.json");
    let mut problem = model::load_problem(path)?;
    for (i, reg) in problem.regimes.iter_mut().enumerate() {
        reg.drift_offset = Some(Vector::from_element(1, 0.5 * i as f64));
        reg.diffusion_offset = Some(Vector::from_element(1, 0.1));
        reg.state_cost = Some(Vector::from_element(1, 1.0));
        reg.control_cost = Some(Vector::from_vec(vec![0.0, -0.5]));
    }

    let care = riccati::solve_care(&problem, &CareOptions::default())?;
    let adjoint = synthesis::solve_stationary_adjoint(&problem, &care)?;
    let strategy = synthesis::build_closed_loop(&problem, &care)?;
    for i in 0..problem.regimes_count() {
        println!(
            "regime {i}: v = {:.5}  Theta = [{:.4}, {:.4}]  nu = [{:.4}, {:.4}]",
            adjoint.v[i][0],
            strategy.theta[i][(0, 0)],
            strategy.theta[i][(1, 0)],
            strategy.nu[i][0],
            strategy.nu[i][1],
        );
    }

    let value = synthesis::value_function(&problem, &care, Some(&adjoint))?;
    let x = Vector::from_element(1, 1.0);
    println!("state-dependent value at x = 1, i = 0: {:.6}", value.evaluate(&x, 0));
    for note in &value.notes {
        println!("note: {note}");
    }
    Ok(())
}
