//! Synthesizes a stabilizer, shifts the problem by it, and shows that the Riccati
//! solution does not depend on the choice.
//!
//! cargo run --example stabilizer

use mjlq::stability::{self, LinearSystem};
use mjlq::{model, riccati, CareOptions};

fn main() -> mjlq::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/scalar_regimes.json");
    let problem = model::load_problem(path)?;

    let sigma = riccati::synthesize_stabilizer(&problem, &CareOptions::default())?;
    let cert = stability::check_l2_stable(&LinearSystem::closed_loop(&problem, &sigma)?)?;
    println!("synthesized stabilizer certified: {}", cert.stable);
    for (i, g) in sigma.theta.iter().enumerate() {
        println!("  Sigma({i}) = [{:.4}, {:.4}]", g[(0, 0)], g[(1, 0)]);
    }

    // The shifted problem has a stable open loop; its gains differ from the original ones by Sigma.
    let shifted = riccati::shift_problem(&problem, &sigma)?;
    let direct = riccati::solve_care(&problem, &CareOptions::default())?;
    let via_shift = riccati::solve_care(&shifted, &CareOptions::default())?;
    println!("|P - P_Sigma| = {:.1e}", direct.p.max_distance(&via_shift.p));
    let composed = (0..problem.regimes_count())
        .map(|i| (&via_shift.theta.theta[i] + &sigma.theta[i] - &direct.theta.theta[i]).norm())
        .fold(0.0, f64::max);
    println!("|Theta - (Theta_Sigma + Sigma)| = {composed:.1e}");
    Ok(())
}
