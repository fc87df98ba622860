//! Stability certificates for the open loop and for a stabilizing feedback.
//!
//! cargo run --example stability

use mjlq::linalg::Mat;
use mjlq::stability::{self, LinearSystem};
use mjlq::{model, FeedbackStrategy};

fn report(name: &str, sys: &LinearSystem) -> mjlq::Result<()> {
    let cert = stability::check_l2_stable(sys)?;
    println!("{name}: stable = {} via {:?}", cert.stable, cert.method);
    println!("  sign screen {:?}, values {:?}", cert.sign_screen, cert.sign_values);
    println!("  spectral abscissa {:.4}", cert.spectral_abscissa.unwrap_or(f64::NAN));
    if let (true, Some(w)) = (cert.stable, &cert.witness_p) {
        let diag: Vec<f64> = w.entries().iter().map(|p| p[(0, 0)]).collect();
        println!("  Lyapunov witness {diag:.4?}");
    }
    Ok(())
}

fn main() -> mjlq::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/scalar_regimes.json");
    let problem = model::load_problem(path)?;

    report("open loop", &LinearSystem::open_loop(&problem))?;

    let sigma = FeedbackStrategy::from_gains(vec![
        Mat::from_column_slice(2, 1, &[0.0, 2.0]),
        Mat::from_column_slice(2, 1, &[-1.0, 0.0]),
        Mat::from_column_slice(2, 1, &[-2.0, -2.0]),
    ]);
    report("closed loop", &LinearSystem::closed_loop(&problem, &sigma)?)?;
    Ok(())
}
