mod common;

use common::scalar;
use mjlq::linalg::{Mat, Vector};
use mjlq::mcsim::{self, SimulationConfig};
use mjlq::model::{FeedbackStrategy, Generator, ProblemSpec, RegimeData};
use mjlq::riccati::{self, CareOptions};
use mjlq::stability::{self, LinearSystem};
use mjlq::{synthesis, CoupledMatrixSet};

fn optimal_scalar() -> (ProblemSpec, mjlq::CareSolution, FeedbackStrategy) {
    let p = common::scalar_example();
    let care = riccati::solve_care(&p, &CareOptions::default()).unwrap();
    let s = synthesis::build_closed_loop(&p, &care).unwrap();
    (p, care, s)
}

fn quick(x0: f64) -> SimulationConfig {
    SimulationConfig::new(Vector::from_element(1, x0), 0).with_paths(400).with_horizon(5.0).with_dt(1e-2)
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let (p, _, s) = optimal_scalar();
    let base = quick(1.0).with_seed(42);
    let r1 = mcsim::simulate_paths(&p, &s, &base.clone().with_workers(1)).unwrap();
    for w in [4, 8] {
        let rw = mcsim::simulate_paths(&p, &s, &base.clone().with_workers(w)).unwrap();
        assert_eq!(rw.cost_mean.to_bits(), r1.cost_mean.to_bits());
        assert_eq!(rw.second_moment_trace, r1.second_moment_trace);
        assert_eq!(rw.samples, r1.samples);
    }
    let other = mcsim::simulate_paths(&p, &s, &base.clone().with_seed(43)).unwrap();
    assert_ne!(other.cost_mean, r1.cost_mean);
}

#[test]
fn chain_marginals_match_the_matrix_exponential() {
    let p = common::scalar_example();
    let g = &p.generator;
    let expm = g.rates().clone().exp();
    let paths = 20_000;
    for i0 in 0..3 {
        let mut counts = [0usize; 3];
        for k in 0..paths {
            let mut rng = mcsim::path_rng(7, k as u64);
            let path = mcsim::sample_chain_path(g, i0, 1.0 + 1e-9, &mut rng);
            counts[path.state_at(1.0)] += 1;
        }
        for j in 0..3 {
            let prob = expm[(i0, j)];
            let freq = counts[j] as f64 / paths as f64;
            let se = (prob * (1.0 - prob) / paths as f64).sqrt();
            assert!((freq - prob).abs() <= 3.0 * se, "P({i0} -> {j}): {freq} vs {prob}");
        }
    }
}

#[test]
fn zero_state_has_zero_cost() {
    let (p, _, s) = optimal_scalar();
    let r = mcsim::simulate_paths(&p, &s, &quick(0.0)).unwrap();
    assert_eq!(r.cost_mean, 0.0);
    assert_eq!(r.cost_stderr, 0.0);
    assert!(r.second_moment_trace.iter().all(|m| m.mean == 0.0));
}

#[test]
fn deterministic_decay_of_minus_identity() {
    let g = Generator::new(Mat::zeros(1, 1)).unwrap();
    let reg = RegimeData::new(scalar(-1.0), scalar(0.0), scalar(0.0), scalar(0.0), scalar(1.0), scalar(0.0), scalar(1.0));
    let p = ProblemSpec::new(1, 1, g, vec![reg], 0.0).unwrap();
    let dt = 1e-3;
    let cfg = SimulationConfig::new(Vector::from_element(1, 2.0), 0).with_paths(3).with_horizon(5.0).with_dt(dt);
    let r = mcsim::simulate_paths(&p, &FeedbackStrategy::zeros(1, 1, 1), &cfg).unwrap();
    assert!(mcsim::check_decay(&r));
    for m in &r.second_moment_trace {
        let euler = 4.0 * (1.0 - dt).powf(2.0 * m.t / dt);
        assert!((m.mean - euler).abs() <= 1e-9 * euler, "t = {}", m.t);
        assert!((m.mean - 4.0 * (-2.0 * m.t).exp()).abs() <= 1e-2 * m.mean);
    }
    // Cost int_0^T x^2 = 2 (1 - e^{-2T}).
    assert!((r.cost_mean - 2.0 * (1.0 - (-10.0_f64).exp())).abs() < 5e-3);
}

#[test]
fn open_loop_example_does_not_decay() {
    let p = common::scalar_example();
    let cfg = quick(1.0).with_paths(2000).with_horizon(10.0);
    let r = match mcsim::simulate_paths(&p, &FeedbackStrategy::zeros(3, 2, 1), &cfg) {
        Ok(r) => r,
        Err(mjlq::Error::Overflow { result, .. }) => *result,
        Err(e) => panic!("{e}"),
    };
    assert!(!mcsim::check_decay(&r));
    let first = r.second_moment_trace[0].mean;
    assert!(r.second_moment_trace.last().unwrap().mean > 1e6 * first);
}

#[test]
fn closed_loop_example_decays_and_is_stationary() {
    let (p, care, s) = optimal_scalar();
    let r = mcsim::simulate_paths(&p, &s, &quick(1.0)).unwrap();
    assert!(mcsim::check_decay(&r));
    let check = mcsim::stationarity_residual(&p, &care.p, None, &r.samples);
    assert!(check.consistent, "{check:?}");
    let r = mcsim::with_stationarity(r, &p, &care.p, None);
    assert!(r.stationarity_residual.unwrap() <= 1e-9);

    // A perturbed gain leaves a residual of about |N delta| |X|.
    let mut bad = s.clone();
    bad.theta[0][(0, 0)] += 0.1;
    let rb = mcsim::simulate_paths(&p, &bad, &quick(1.0)).unwrap();
    let check = mcsim::stationarity_residual(&p, &care.p, None, &rb.samples);
    assert!(check.residual > 1e-3, "{check:?}");
}

#[test]
fn halving_shares_brownian_paths_and_reproduces_the_fine_run() {
    let (p, _, s) = optimal_scalar();
    let cfg = quick(1.0).with_dt(2e-2);
    let pair = mcsim::simulate_dt_halving(&p, &s, &cfg).unwrap();
    let fine = mcsim::simulate_paths(&p, &s, &cfg.clone().with_dt(1e-2)).unwrap();
    assert_eq!(pair.fine, fine);
    assert_eq!(pair.coarse.config.dt, 2e-2);
    // Coupled differences are far less noisy than the estimates themselves.
    assert!(pair.shift_stderr < 0.5 * pair.fine.cost_stderr);
}

#[test]
fn discounted_cost_matches_the_transformed_value() {
    let prob = common::planar_example();
    let reduced = synthesis::discount_transform(&prob).unwrap();
    let care = riccati::solve_care(&reduced, &CareOptions::default()).unwrap();
    let s = synthesis::undiscount_strategy(&synthesis::build_closed_loop(&reduced, &care).unwrap(), 0.2).unwrap();
    let x = Vector::from_column_slice(&[1.0, -0.5]);
    let cfg = SimulationConfig::new(x.clone(), 1).with_paths(4000).with_horizon(6.0).with_dt(2e-3).with_discount(0.2);
    let r = mcsim::simulate_paths(&prob, &s, &cfg).unwrap();
    let v = x.dot(&(&care.p[1] * &x));
    // Discretization budget of 1% on top of the sampling error.
    assert!((r.cost_mean - v).abs() <= 3.0 * r.cost_stderr + 1e-2 * v, "{} vs {v}", r.cost_mean);
}

#[test]
fn second_moment_integral_respects_the_a_priori_bound() {
    let g = Generator::new(Mat::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5])).unwrap();
    let mk = |a: f64, c: f64| {
        let mut reg = RegimeData::new(scalar(a), scalar(0.0), scalar(c), scalar(0.0), scalar(1.0), scalar(0.0), scalar(0.0));
        reg.drift_offset = Some(Vector::from_element(1, 0.3));
        reg.diffusion_offset = Some(Vector::from_element(1, 0.2));
        reg.state_cost = Some(Vector::zeros(1));
        reg.control_cost = Some(Vector::zeros(1));
        reg
    };
    let p = ProblemSpec::new(1, 1, g, vec![mk(-1.0, 0.5), mk(-0.5, 0.8)], 0.0).unwrap();
    let sys = LinearSystem::open_loop(&p);
    let cert = stability::check_l2_stable(&sys).unwrap();
    let w = cert.witness_p.unwrap();
    // K from E d<P X, X> <= -|X|^2/2 + 4p^2 |b|^2 + (4p^2 c^2 + p) |sigma|^2.
    let pm = w.max_norm();
    let cm = sys.cbar.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let k = 2.0 * pm.max(4.0 * pm * pm).max(4.0 * pm * pm * cm * cm + pm);
    let t = 5.0;
    let cfg = SimulationConfig::new(Vector::from_element(1, 1.5), 0).with_paths(500).with_horizon(t).with_dt(1e-2);
    let r = mcsim::simulate_paths(&p, &FeedbackStrategy::zeros(2, 1, 1), &cfg).unwrap();
    let bound = k * (1.5 * 1.5 + t * (0.09 + 0.04));
    assert!(r.cost_mean > 0.0 && r.cost_mean <= bound, "{} > {bound}", r.cost_mean);
}

#[test]
fn lyapunov_solution_has_its_probabilistic_representation() {
    let g = Generator::new(Mat::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0])).unwrap();
    let sys = LinearSystem::new(
        vec![Mat::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -1.5]), Mat::from_row_slice(2, 2, &[-2.0, 0.0, 0.3, -0.7])],
        vec![Mat::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]), Mat::zeros(2, 2)],
        g,
    )
    .unwrap();
    let lambda = CoupledMatrixSet::identity(2, 2);
    let cfg = SimulationConfig::new(Vector::zeros(2), 0).with_paths(2000).with_horizon(12.0).with_dt(2e-3);
    let check = stability::lyapunov_representation_check(&sys, &lambda, &cfg).unwrap();
    for i in 0..2 {
        assert!(check.relative_error[i] < 0.05, "{check:?}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (p, _, s) = optimal_scalar();
    for cfg in [
        quick(1.0).with_paths(0),
        quick(1.0).with_dt(-1.0),
        quick(1.0).with_horizon(0.0),
        SimulationConfig::new(Vector::zeros(2), 0),
        SimulationConfig::new(Vector::zeros(1), 3),
    ] {
        assert!(mcsim::simulate_paths(&p, &s, &cfg).is_err());
    }
}
