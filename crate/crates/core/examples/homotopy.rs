//! The eps-homotopy: regularize the control weight, solve, and let eps go to zero.
//! It recovers the direct solution when one exists and reports failure when none does.
//!
//! cargo run --example homotopy

use mjlq::linalg::Mat;
use mjlq::model::{self, Generator, ProblemSpec, RegimeData};
use mjlq::{riccati, CareOptions};

fn scalar(a: f64, b: f64, q: f64) -> mjlq::Result<ProblemSpec> {
    let s = |v: f64| Mat::from_element(1, 1, v);
    let reg = RegimeData::new(s(a), s(b), s(0.0), s(0.0), s(q), s(0.0), s(0.0));
    ProblemSpec::new(1, 1, Generator::new(Mat::zeros(1, 1))?, vec![reg], 0.0)
}

fn main() -> mjlq::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/scalar_regimes.json");
    let problem = model::load_problem(path)?;
    let direct = riccati::solve_care(&problem, &CareOptions::default())?;
    let hom = riccati::solve_care_eps_homotopy(&problem, 1.0, &CareOptions::default())?;
    println!("scalar example: legs {}, |P_hom - P| = {:.1e}", hom.trace.homotopy.len(), hom.p.max_distance(&direct.p));

    // No control in the dynamics and R = 0: P = 1 is accepted with N = 0.
    let inert = scalar(-1.0, 0.0, 2.0)?;
    let sol = riccati::solve_care_eps_homotopy(&inert, 1.0, &CareOptions::default())?;
    println!("inert control: P = {:.6}", sol.p[0][(0, 0)]);

    // Free control with zero weight: P_eps -> 0 but M(0) = Q != 0, so there is no solution.
    let degenerate = scalar(-1.0, 1.0, 1.0)?;
    match riccati::solve_care_eps_homotopy(&degenerate, 1.0, &CareOptions::default()) {
        Ok(s) => println!("degenerate: unexpectedly solved, P = {:.6}", s.p[0][(0, 0)]),
        Err(e) => println!("degenerate: {e}"),
    }
    Ok(())
}
