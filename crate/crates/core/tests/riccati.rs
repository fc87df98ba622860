mod common;

use common::{scalar_care_oracle, scalar_problem};
use mjlq::linalg::{self, Mat};
use mjlq::model::{CoupledMatrixSet, FeedbackStrategy};
use mjlq::riccati::{self, CareOptions, CdreOptions};
use mjlq::stability::{self, LinearSystem};
use mjlq::{synthesis, Error};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scalar_solutions_match_the_quadratic_root(seed in any::<u64>()) {
        let (a, b, c, d, q, s, r) = common::random_scalar_instance(&mut common::rng(seed));
        let exact = scalar_care_oracle(a, b, c, d, q, s, r).expect("unique stabilizing root");
        let sol = riccati::solve_care(&scalar_problem(a, b, c, d, q, s, r), &CareOptions::default()).unwrap();
        prop_assert!((sol.p[0][(0, 0)] - exact).abs() <= 1e-9 * (1.0 + exact.abs()),
            "P = {} vs {exact}", sol.p[0][(0, 0)]);
    }

    #[test]
    fn gains_solve_the_stationarity_identity(seed in any::<u64>()) {
        // N(P) Theta + L(P)^T = 0 at the solution.
        let (a, b, c, d, q, s, r) = common::random_scalar_instance(&mut common::rng(seed));
        let prob = scalar_problem(a, b, c, d, q, s, r);
        let sol = riccati::solve_care(&prob, &CareOptions::default()).unwrap();
        let res = riccati::n_of(&prob, &sol.p, 0) * &sol.theta.theta[0] + riccati::l_of(&prob, &sol.p, 0).transpose();
        prop_assert!(res.norm() < 1e-9);
    }
}

#[test]
fn hand_instance_is_root_of_3p2_plus_p_minus_1() {
    let sol = riccati::solve_care(&scalar_problem(-1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0), &CareOptions::default()).unwrap();
    let exact = (-1.0 + 13.0_f64.sqrt()) / 6.0;
    assert!((sol.p[0][(0, 0)] - exact).abs() < 1e-9);
}

#[test]
fn shift_invariance_on_scalar_example() {
    let p = common::scalar_example();
    let direct = riccati::solve_care(&p, &CareOptions::default()).unwrap();
    assert_eq!(direct.trace.stabilizer_source, "synthesized");
    let via_sigma = riccati::solve_care(&p, &CareOptions { sigma: Some(common::scalar_sigma()), ..Default::default() }).unwrap();
    assert!(direct.p.max_distance(&via_sigma.p) <= 1e-7);
    // Theta^ = Theta^_Sigma + Sigma with Theta^_Sigma the gain of the shifted problem.
    for sol in [&direct, &via_sigma] {
        let shifted = riccati::shift_problem(&p, &sol.sigma).unwrap();
        let g = riccati::optimal_gains(&shifted, &sol.p).unwrap();
        for i in 0..3 {
            assert!((&g[i] + &sol.sigma.theta[i] - &sol.theta.theta[i]).norm() <= 1e-7);
        }
    }
    // The shifted problem has the same Riccati solution.
    let shifted = riccati::shift_problem(&p, &common::scalar_sigma()).unwrap();
    assert!(riccati::residual_norms(&shifted, &direct.p).iter().all(|r| *r < 1e-8));
}

#[test]
fn scalar_example_shift_coefficients() {
    let shifted = riccati::shift_problem(&common::scalar_example(), &common::scalar_sigma()).unwrap();
    let a: Vec<f64> = shifted.regimes.iter().map(|r| r.a[(0, 0)]).collect();
    let c: Vec<f64> = shifted.regimes.iter().map(|r| r.c[(0, 0)]).collect();
    let q: Vec<f64> = shifted.regimes.iter().map(|r| r.q[(0, 0)]).collect();
    assert_eq!(a, vec![-1.0, -3.0, -2.0]);
    assert_eq!(c, vec![1.0, 1.0, -1.0]);
    assert_eq!(q, vec![29.0, 13.0, 79.0]);
    let s: Vec<[f64; 2]> = shifted.regimes.iter().map(|r| [r.s[(0, 0)], r.s[(1, 0)]]).collect();
    assert_eq!(s, vec![[5.0, 9.0], [-5.0, -1.0], [-13.0, -20.0]]);
    // Shifting back by -Sigma recovers the original data.
    let back = riccati::shift_problem(&shifted, &common::scalar_sigma().negated()).unwrap();
    assert_eq!(back, common::scalar_example());
}

#[test]
fn shifted_problem_has_the_same_solution() {
    let p = common::scalar_example();
    let sigma = common::scalar_sigma();
    let direct = riccati::solve_care(&p, &CareOptions::default()).unwrap();
    let on_shifted = riccati::solve_care(&riccati::shift_problem(&p, &sigma).unwrap(), &CareOptions::default()).unwrap();
    assert!(direct.p.max_distance(&on_shifted.p) <= 1e-7);
    for i in 0..3 {
        assert!((&on_shifted.theta.theta[i] + &sigma.theta[i] - &direct.theta.theta[i]).norm() <= 1e-7);
    }
}

#[test]
fn zero_shift_leaves_problem_unchanged() {
    let p = common::planar_example();
    assert_eq!(riccati::shift_problem(&p, &FeedbackStrategy::zeros(3, 2, 2)).unwrap(), p);
}

#[test]
fn finite_horizon_values_increase_with_horizon() {
    // Nonnegative running cost and G = 0: P(0; T) is nondecreasing in T.
    for p in [common::scalar_example(), synthesis::discount_transform(&common::planar_example()).unwrap()] {
        let zero = CoupledMatrixSet::zeros(3, p.n);
        let mut previous = zero.clone();
        for t in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let next = riccati::integrate_cdre(&p, &zero, t, &CdreOptions::default()).unwrap();
            for i in 0..3 {
                assert!(linalg::min_eigenvalue(&(&next[i] - &previous[i])) >= -1e-10, "T = {t}");
            }
            previous = next;
        }
    }
}

#[test]
fn cdre_limit_is_the_algebraic_solution() {
    let p = common::scalar_example();
    let care = riccati::solve_care(&p, &CareOptions::default()).unwrap();
    let far = riccati::integrate_cdre(&p, &CoupledMatrixSet::zeros(3, 1), 64.0, &CdreOptions::default()).unwrap();
    assert!(far.max_distance(&care.p) < 1e-6);
    // Checkpoint changes shrink once the sweep has settled.
    let log = &care.trace.checkpoints;
    assert!(log.len() >= 3);
    let tail: Vec<f64> = log.iter().skip(2).map(|c| c.change).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]), "{tail:?}");
}

#[test]
fn solution_is_stabilizing_and_verified() {
    let p = common::scalar_example();
    let care = riccati::solve_care(&p, &CareOptions::default()).unwrap();
    let cert = stability::check_l2_stable(&LinearSystem::closed_loop(&p, &care.theta).unwrap()).unwrap();
    assert!(cert.stable);
    let report = riccati::verify_care(&p, &care.p, None).unwrap();
    assert!(report.accepted);
    assert!(report.regimes.iter().all(|r| r.min_eig_n > 0.0));
}

#[test]
fn perturbed_solution_is_rejected() {
    let p = common::scalar_example();
    let care = riccati::solve_care(&p, &CareOptions::default()).unwrap();
    let mut entries = care.p.entries().to_vec();
    entries[1][(0, 0)] += 1e-4;
    let report = riccati::verify_care(&p, &CoupledMatrixSet::new(entries), None).unwrap();
    assert!(!report.accepted);
}

#[test]
fn homotopy_matches_direct_solve() {
    let p = common::scalar_example();
    let direct = riccati::solve_care(&p, &CareOptions::default()).unwrap();
    let hom = riccati::solve_care_eps_homotopy(&p, 1.0, &CareOptions::default()).unwrap();
    assert!(hom.p.max_distance(&direct.p) <= 1e-6);
    assert!(hom.verification.as_ref().unwrap().accepted);
    let eps: Vec<f64> = hom.trace.homotopy.iter().map(|l| l.eps).collect();
    assert!(eps.windows(2).all(|w| w[1] == 0.5 * w[0]));
}

#[test]
fn unstabilizable_instance_is_reported() {
    // A = 1, B = D = 0.
    let p = scalar_problem(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0);
    assert!(matches!(riccati::solve_care(&p, &CareOptions::default()), Err(Error::NotStabilizable(_))));
}

#[test]
fn supplied_non_stabilizer_is_refused() {
    let p = common::scalar_example();
    let opts = CareOptions { sigma: Some(FeedbackStrategy::zeros(3, 2, 1)), ..Default::default() };
    assert!(matches!(riccati::solve_care(&p, &opts), Err(Error::NotStabilizable(_))));
}

#[test]
fn degenerate_homotopy_rejects_unsolvable_instance() {
    // Free control with zero weight drives P_eps to 0, which leaves M(0) = Q = 1.
    let p = scalar_problem(-1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let out = riccati::solve_care_eps_homotopy(&p, 1.0, &CareOptions::default());
    assert!(
        matches!(out, Err(Error::HomotopyDiverged { .. }) | Err(Error::VerificationRejected(_))),
        "{out:?}"
    );
}

#[test]
fn verify_rejects_zero_and_accepts_degenerate() {
    let p = common::scalar_example();
    let report = riccati::verify_care(&p, &CoupledMatrixSet::zeros(3, 1), None).unwrap();
    assert!(!report.accepted);
    // R = 0, B = D = 0, A = -1: P = Q / 2 solves the constrained equations.
    let deg = scalar_problem(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let report = riccati::verify_care(&deg, &CoupledMatrixSet::from_scalars(&[0.5]), None).unwrap();
    assert!(report.accepted, "{report:?}");
    let pi = [Mat::from_element(1, 1, 3.0)];
    assert!(riccati::verify_care(&deg, &CoupledMatrixSet::from_scalars(&[0.5]), Some(&pi)).unwrap().accepted);
}
