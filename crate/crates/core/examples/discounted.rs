//! Discounted planar problem: the discount is folded into the drift, solved, and the
//! gains carried back to the original problem.
//!
//! cargo run --example discounted

use mjlq::linalg::Mat;
use mjlq::{model, riccati, synthesis, CareOptions};

fn rows(m: &Mat) -> String {
    let rows: Vec<String> = m.row_iter().map(|r| format!("{:>8.4?}", r.iter().collect::<Vec<_>>())).collect();
    rows.join(" ")
}

fn main() -> mjlq::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/discounted_planar.json");
    let problem = model::load_problem(path)?;
    println!("discount rate r = {}", problem.discount_r);

    let reduced = synthesis::discount_transform(&problem)?;
    let care = riccati::solve_care(&reduced, &CareOptions::default())?;
    let strategy = synthesis::undiscount_strategy(&synthesis::build_closed_loop(&reduced, &care)?, problem.discount_r)?;

    for i in 0..problem.regimes_count() {
        println!("regime {i}: |E(P)| = {:.1e}", care.residuals[i]);
        println!("  P_r   = {}", rows(&care.p[i]));
        println!("  Theta = {}", rows(&strategy.theta[i]));
    }
    Ok(())
}
