#![allow(dead_code)]

use std::path::PathBuf;

use mjlq::linalg::Mat;
use mjlq::model::{self, Generator, ProblemSpec, RegimeData};
use mjlq::FeedbackStrategy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn scalar_example() -> ProblemSpec {
    model::load_problem(data_path("scalar_regimes.json")).unwrap()
}

pub fn planar_example() -> ProblemSpec {
    model::load_problem(data_path("discounted_planar.json")).unwrap()
}

pub const P_SCALAR: [f64; 3] = [7.44607347, 2.81837045, 19.16846222];

pub const THETA_SCALAR: [[f64; 2]; 3] = [[-1.6350, 1.4994], [-1.2202, -0.4055], [-1.7918, -2.4117]];

pub const P_PLANAR: [[f64; 4]; 3] = [
    [0.2824, 0.0953, 0.0953, 0.3082],
    [0.2769, 0.0583, 0.0583, 0.2940],
    [0.1998, 0.0575, 0.0575, 0.2155],
];

pub const THETA_PLANAR: [[f64; 4]; 3] = [
    [0.1074, -0.2087, -0.0694, -0.0573],
    [0.5739, -0.2677, 0.0640, -0.0308],
    [-0.1907, -0.3502, 0.0297, 0.1535],
];

/// A known stabilizer of the scalar example.
pub fn scalar_sigma() -> FeedbackStrategy {
    FeedbackStrategy::from_gains(vec![
        Mat::from_column_slice(2, 1, &[0.0, 2.0]),
        Mat::from_column_slice(2, 1, &[-1.0, 0.0]),
        Mat::from_column_slice(2, 1, &[-2.0, -2.0]),
    ])
}

pub fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

/// Single-regime scalar problem `(a, b, c, d, q, s, r)`.
pub fn scalar_problem(a: f64, b: f64, c: f64, d: f64, q: f64, s: f64, r: f64) -> ProblemSpec {
    let g = Generator::new(Mat::zeros(1, 1)).unwrap();
    let reg = RegimeData::new(scalar(a), scalar(b), scalar(c), scalar(d), scalar(q), scalar(s), scalar(r));
    ProblemSpec::new(1, 1, g, vec![reg], 0.0).unwrap()
}

/// Stabilizing root of the scalar Riccati equation, by hand:
/// `(k d^2 - beta^2) P^2 + (k r + q d^2 - 2 beta s) P + (q r - s^2) = 0`
/// with `k = 2a + c^2`, `beta = b + c d`; the root must keep `d^2 P + r > 0` and make
/// `2(a + b K) + (c + d K)^2 < 0` for `K = -(beta P + s) / (d^2 P + r)`.
pub fn scalar_care_oracle(a: f64, b: f64, c: f64, d: f64, q: f64, s: f64, r: f64) -> Option<f64> {
    let k = 2.0 * a + c * c;
    let beta = b + c * d;
    let qa = k * d * d - beta * beta;
    let qb = k * r + q * d * d - 2.0 * beta * s;
    let qc = q * r - s * s;
    let roots: Vec<f64> = if qa.abs() < 1e-14 {
        vec![-qc / qb]
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Cancellation-free pair.
        let t = -0.5 * (qb + qb.signum() * sq);
        vec![t / qa, qc / t]
    };
    let good: Vec<f64> = roots
        .into_iter()
        .filter(|p| {
            let nn = d * d * p + r;
            if nn <= 0.0 {
                return false;
            }
            let gain = -(beta * p + s) / nn;
            2.0 * (a + b * gain) + (c + d * gain).powi(2) < 0.0
        })
        .collect();
    (good.len() == 1).then(|| good[0])
}

/// Random uniformly convex, stabilizable scalar instance.
pub fn random_scalar_instance(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64, f64, f64, f64) {
    loop {
        let a: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(0.3..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let c: f64 = rng.random_range(-1.0..1.0);
        let d: f64 = rng.random_range(-1.0..1.0);
        let r: f64 = rng.random_range(0.5..3.0);
        let s: f64 = rng.random_range(-1.0..1.0);
        let q = s * s / r + rng.random_range(0.0..3.0);
        // Best achievable closed-loop rate 2(a + bK) + (c + dK)^2 over K.
        let best = if d.abs() > 1e-9 {
            2.0 * a + c * c - (b + c * d).powi(2) / (d * d)
        } else {
            f64::NEG_INFINITY
        };
        if best < -0.1 {
            return (a, b, c, d, q, s, r);
        }
    }
}

/// Random generator with rates in `[0, max_rate)`.
pub fn random_generator(rng: &mut ChaCha8Rng, l: usize, max_rate: f64) -> Generator {
    let mut g = Mat::zeros(l, l);
    for i in 0..l {
        let mut row = 0.0;
        for j in 0..l {
            if i != j {
                let v = rng.random_range(0.0..max_rate);
                g[(i, j)] = v;
                row += v;
            }
        }
        g[(i, i)] = -row;
    }
    Generator::new(g).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Spectral abscissa of the second-moment generator, assembled independently of the
/// library: `d/dt vec E[X X^T 1_{alpha=i}] = (A_i (+) A_i + C_i (x) C_i) m_i + sum_j pi_ji m_j`.
pub fn second_moment_abscissa(a: &[Mat], c: &[Mat], g: &Mat) -> f64 {
    let l = a.len();
    let n = a[0].nrows();
    let nn = n * n;
    let eye = Mat::identity(n, n);
    let mut big = Mat::zeros(nn * l, nn * l);
    for i in 0..l {
        let block = a[i].kronecker(&eye) + eye.kronecker(&a[i]) + c[i].kronecker(&c[i]);
        big.view_mut((i * nn, i * nn), (nn, nn)).add_assign(&block);
        for j in 0..l {
            let rate = g[(j, i)];
            if rate != 0.0 {
                let mut v = big.view_mut((i * nn, j * nn), (nn, nn));
                for k in 0..nn {
                    v[(k, k)] += rate;
                }
            }
        }
    }
    big.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

use std::ops::AddAssign;
