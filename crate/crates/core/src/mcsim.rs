//! Monte Carlo simulation of the controlled regime-switching SDE
//!
//! ```text
//! dX = [A X + B u + b] dt + [C X + D u + sigma] dW,   u = Theta(alpha) X + nu(alpha)
//! ```
//!
//! with a scalar Brownian motion `W`. The chain is sampled exactly first; the diffusion
//! is then stepped by Euler-Maruyama on a global grid of spacing `dt`, with substeps cut
//! at jump times and trace checkpoints so that regime switches land on step boundaries.
//!
//! Each path owns a ChaCha8 stream keyed by `(master_seed, path_index)` and per-path
//! outcomes are reduced in index order by pairwise summation, so results do not depend
//! on the number of workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{CoupledMatrixSet, FeedbackStrategy, Generator, ProblemSpec};
use crate::riccati;
use crate::stability::LinearSystem;
use crate::synthesis::StationaryAdjoint;

/// |X| above which a path is declared divergent.
pub const OVERFLOW_THRESHOLD: f64 = 1e12;
/// Fraction of divergent paths that turns a run into an [`Error::Overflow`].
pub const OVERFLOW_FRACTION: f64 = 0.01;
/// Number of second-moment checkpoints over the horizon.
pub const CHECKPOINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub horizon_t: f64,
    pub dt: f64,
    pub master_seed: u64,
    #[serde(with = "crate::model::serde_mat::vector")]
    pub x0: Vector,
    pub i0: usize,
    #[serde(default)]
    pub discount_r: f64,
    /// Worker threads; `None` uses the global pool. Never changes the result.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Paths whose checkpoint states are kept in [`SimResult::samples`].
    #[serde(default = "default_record_paths")]
    pub record_paths: usize,
}

fn default_record_paths() -> usize {
    32
}

impl SimulationConfig {
    pub fn new(x0: Vector, i0: usize) -> Self {
        Self {
            n_paths: 10_000,
            horizon_t: 20.0,
            dt: 1e-3,
            master_seed: 0x5eed,
            x0,
            i0,
            discount_r: 0.0,
            workers: None,
            record_paths: default_record_paths(),
        }
    }

    pub fn with_paths(mut self, n: usize) -> Self {
        self.n_paths = n;
        self
    }

    pub fn with_horizon(mut self, t: f64) -> Self {
        self.horizon_t = t;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }

    pub fn with_discount(mut self, r: f64) -> Self {
        self.discount_r = r;
        self
    }

    fn validate(&self, n: usize, l: usize) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Validation("n_paths must be positive".into()));
        }
        if !(self.horizon_t > 0.0 && self.horizon_t.is_finite()) {
            return Err(Error::Validation("horizon must be positive".into()));
        }
        if !(self.dt > 0.0) || self.dt > self.horizon_t {
            return Err(Error::Validation("dt must lie in (0, horizon]".into()));
        }
        if !(self.discount_r >= 0.0) {
            return Err(Error::Validation("discount rate must be >= 0".into()));
        }
        if self.x0.len() != n {
            return Err(Error::Dimension(format!("x0 has length {}, expected {n}", self.x0.len())));
        }
        if self.i0 >= l {
            return Err(Error::Validation(format!("initial regime {} out of range 0..{l}", self.i0)));
        }
        Ok(())
    }

    /// Step-size recommendation `dt <= 0.1 / max_i(-pi_ii + |A(i)| + |C(i)|^2)`.
    pub fn step_warning(&self, sys: &LinearSystem) -> Option<String> {
        let stiffness = (0..sys.regimes())
            .map(|i| sys.generator.exit_rate(i) + sys.abar[i].norm() + sys.cbar[i].norm_squared())
            .fold(0.0, f64::max);
        (stiffness > 0.0 && self.dt > 0.1 / stiffness).then(|| {
            format!("dt = {} exceeds the recommended {:.3e}", self.dt, 0.1 / stiffness)
        })
    }
}

/// A piecewise-constant chain trajectory on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPath {
    pub initial: usize,
    /// Sorted `(jump time, new state)` pairs, all strictly inside the horizon.
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl ChainPath {
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jumps.partition_point(|&(s, _)| s <= t);
        if k == 0 {
            self.initial
        } else {
            self.jumps[k - 1].1
        }
    }

    /// Time spent in each state over the horizon.
    pub fn occupation(&self, l: usize) -> Vec<f64> {
        let mut occ = vec![0.0; l];
        let mut t = 0.0;
        let mut state = self.initial;
        for &(s, j) in &self.jumps {
            occ[state] += s - t;
            t = s;
            state = j;
        }
        occ[state] += self.horizon - t;
        occ
    }
}

/// Independent random stream for one path.
pub fn path_rng(master_seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index);
    rng
}

/// Exact simulation of the chain: exponential holding times, jumps by `pi_ij / -pi_ii`.
pub fn sample_chain_path<R: Rng + ?Sized>(generator: &Generator, i0: usize, horizon: f64, rng: &mut R) -> ChainPath {
    let l = generator.regimes();
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut state = i0;
    loop {
        let rate = generator.exit_rate(state);
        if !(rate > 0.0) {
            break;
        }
        let hold: f64 = Exp::new(rate).expect("positive rate").sample(rng);
        t += hold;
        if t >= horizon {
            break;
        }
        let target = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = state;
        for j in (0..l).filter(|&j| j != state) {
            let w = generator.rate(state, j);
            if w <= 0.0 {
                continue;
            }
            acc += w;
            next = j;
            if target < acc {
                break;
            }
        }
        state = next;
        jumps.push((t, state));
    }
    ChainPath { initial: i0, jumps, horizon }
}

/// One trace checkpoint: `E|X(t)|^2` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    pub t: f64,
    #[serde(with = "crate::model::serde_mat::nullable")]
    pub mean: f64,
    #[serde(with = "crate::model::serde_mat::nullable")]
    pub stderr: f64,
}

/// A recorded state on a sampled path, for plumbing checks such as stationarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub path: usize,
    pub t: f64,
    pub regime: usize,
    #[serde(with = "crate::model::serde_mat::vector")]
    pub x: Vector,
    #[serde(with = "crate::model::serde_mat::vector")]
    pub u: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    #[serde(with = "crate::model::serde_mat::nullable")]
    pub cost_mean: f64,
    #[serde(with = "crate::model::serde_mat::nullable")]
    pub cost_stderr: f64,
    /// `E|X(t)|^2` over all paths; diverged paths contribute their state at divergence.
    pub second_moment_trace: Vec<MomentPoint>,
    /// Filled in by [`stationarity_residual`] when a Riccati solution is available.
    pub stationarity_residual: Option<f64>,
    pub n_paths_used: usize,
    pub n_paths_diverged: usize,
    /// Tail of the cost integral beyond the horizon, extrapolated from the measured decay
    /// rate of the second moment. `None` when no decay is observed.
    pub truncation_bias_estimate: Option<f64>,
    pub samples: Vec<StateSample>,
    pub config: SimulationConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SimResult {
    /// True when the divergence fraction makes the cost estimate unreliable.
    pub fn overflowed(&self) -> bool {
        let total = self.n_paths_used + self.n_paths_diverged;
        total > 0 && self.n_paths_diverged as f64 >= OVERFLOW_FRACTION * total as f64
    }
}

/// Per-regime coefficients with the feedback substituted.
struct ClosedLoop {
    n: usize,
    a: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    drift: Vec<Vec<f64>>,
    diffusion: Vec<Vec<f64>>,
    cost_quad: Vec<Vec<f64>>,
    cost_lin: Vec<Vec<f64>>,
    cost_const: Vec<f64>,
    theta: Vec<Mat>,
    nu: Vec<Vector>,
}

fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl ClosedLoop {
    fn new(problem: &ProblemSpec, strategy: &FeedbackStrategy) -> Self {
        let mut out = Self {
            n: problem.n,
            a: vec![],
            c: vec![],
            drift: vec![],
            diffusion: vec![],
            cost_quad: vec![],
            cost_lin: vec![],
            cost_const: vec![],
            theta: strategy.theta.clone(),
            nu: strategy.nu.clone(),
        };
        for (i, reg) in problem.regimes.iter().enumerate() {
            let th = &strategy.theta[i];
            let nu = &strategy.nu[i];
            out.a.push(row_major(&(&reg.a + &reg.b * th)));
            out.c.push(row_major(&(&reg.c + &reg.d * th)));
            out.drift.push((&reg.b * nu + reg.b_vec()).as_slice().to_vec());
            out.diffusion.push((&reg.d * nu + reg.sigma_vec()).as_slice().to_vec());
            let st = reg.s.transpose();
            let quad = &reg.q + &st * th + th.transpose() * &reg.s + th.transpose() * &reg.r * th;
            out.cost_quad.push(row_major(&crate::linalg::symmetrize(&quad)));
            let lin = &st * nu + th.transpose() * (&reg.r * nu) + reg.q_vec() + th.transpose() * reg.rho_vec();
            out.cost_lin.push(lin.as_slice().to_vec());
            out.cost_const.push(nu.dot(&(&reg.r * nu)) + 2.0 * reg.rho_vec().dot(nu));
        }
        out
    }

    #[inline]
    fn integrand(&self, i: usize, x: &[f64]) -> f64 {
        let n = self.n;
        let q = &self.cost_quad[i];
        let lin = &self.cost_lin[i];
        let mut acc = self.cost_const[i];
        for r in 0..n {
            let mut row = 0.0;
            for s in 0..n {
                row += q[r * n + s] * x[s];
            }
            acc += x[r] * (row + 2.0 * lin[r]);
        }
        acc
    }

    fn control(&self, i: usize, x: &[f64]) -> Vector {
        &self.theta[i] * Vector::from_column_slice(x) + &self.nu[i]
    }
}

/// Drives one path of a (possibly matrix-valued) linear SDE over the chain path.
///
/// `state` is column-major `n x k`; the affine offsets apply only when `k == 1`.
struct Stepper<'a> {
    n: usize,
    a: &'a [Vec<f64>],
    c: &'a [Vec<f64>],
    drift: Option<&'a [Vec<f64>]>,
    diffusion: Option<&'a [Vec<f64>]>,
    dt: f64,
    horizon: f64,
}

enum StepEvent {
    /// Emitted before the substep `[t, t + h]` with its Brownian increment. `coarse_end`
    /// marks substeps that end on the `2 dt` grid, at a jump or at a checkpoint.
    Step { t: f64, h: f64, dw: f64, regime: usize, coarse_end: bool },
    Checkpoint { k: usize, t: f64, regime: usize },
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn euler_step(
    n: usize,
    a: &[f64],
    c: &[f64],
    drift: Option<&[f64]>,
    diffusion: Option<&[f64]>,
    x: &[f64],
    h: f64,
    dw: f64,
    out: &mut [f64],
) {
    for r in 0..n {
        let mut ax = 0.0;
        let mut cx = 0.0;
        for s in 0..n {
            ax += a[r * n + s] * x[s];
            cx += c[r * n + s] * x[s];
        }
        if let Some(d) = drift {
            ax += d[r];
        }
        if let Some(d) = diffusion {
            cx += d[r];
        }
        out[r] = x[r] + ax * h + cx * dw;
    }
}

fn escaped(x: &[f64]) -> bool {
    x.iter().any(|v| !(v.abs() <= OVERFLOW_THRESHOLD))
}

impl Stepper<'_> {
    /// Returns `false` when the path overflowed.
    fn run<R: Rng, F: FnMut(StepEvent, &[f64])>(
        &self,
        chain: &ChainPath,
        state: &mut [f64],
        scratch: &mut [f64],
        rng: &mut R,
        mut on_event: F,
    ) -> bool {
        let n = self.n;
        let cols = state.len() / n;
        let mut t = 0.0_f64;
        let mut grid_index: u64 = 0;
        let mut regime = chain.initial;
        let mut jump_index = 0;
        let mut next_checkpoint = 1;
        let checkpoint_time = |k: usize| self.horizon * k as f64 / CHECKPOINTS as f64;
        let merge = 1e-9 * self.dt;
        while next_checkpoint <= CHECKPOINTS {
            let jump_t = chain.jumps.get(jump_index).map_or(f64::INFINITY, |j| j.0);
            let ck_t = checkpoint_time(next_checkpoint);
            let event_t = jump_t.min(ck_t);
            let grid_t = (grid_index + 1) as f64 * self.dt;
            let target = if grid_t < event_t - merge { grid_t } else { event_t };
            let on_grid = (grid_t - target).abs() <= merge;
            if on_grid {
                grid_index += 1;
            }
            let is_jump = target == jump_t;
            let is_checkpoint = target == ck_t;
            let h = target - t;
            if h > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                let dw = h.sqrt() * z;
                let coarse_end = is_jump || is_checkpoint || (on_grid && grid_index % 2 == 0);
                on_event(StepEvent::Step { t, h, dw, regime, coarse_end }, state);
                let drift = self.drift.map(|d| d[regime].as_slice());
                let diffusion = self.diffusion.map(|d| d[regime].as_slice());
                for col in 0..cols {
                    let range = col * n..(col + 1) * n;
                    euler_step(
                        n,
                        &self.a[regime],
                        &self.c[regime],
                        drift,
                        diffusion,
                        &state[range.clone()],
                        h,
                        dw,
                        &mut scratch[range],
                    );
                }
                state.copy_from_slice(scratch);
                if escaped(state) {
                    return false;
                }
            }
            t = target;
            if is_jump {
                regime = chain.jumps[jump_index].1;
                jump_index += 1;
            }
            if is_checkpoint {
                on_event(StepEvent::Checkpoint { k: next_checkpoint - 1, t, regime }, state);
                next_checkpoint += 1;
            }
        }
        true
    }
}

/// Per-path accumulators of one discretization.
#[derive(Clone)]
struct Track {
    cost: f64,
    moments: [f64; CHECKPOINTS],
    integrands: [f64; CHECKPOINTS],
    reached: usize,
    diverged: bool,
}

impl Track {
    fn new() -> Self {
        Self { cost: 0.0, moments: [0.0; CHECKPOINTS], integrands: [0.0; CHECKPOINTS], reached: 0, diverged: false }
    }

    fn checkpoint(&mut self, k: usize, weighted_integrand: f64, x: &[f64]) {
        self.moments[k] = x.iter().map(|v| v * v).sum();
        self.integrands[k] = weighted_integrand;
        self.reached = k + 1;
    }

    /// A diverged path keeps its last state in the remaining second moments.
    fn freeze(&mut self, x: &[f64]) {
        self.diverged = true;
        let frozen: f64 = x.iter().map(|v| v * v).sum();
        let frozen = if frozen.is_finite() { frozen.clamp(OVERFLOW_THRESHOLD.powi(2), FROZEN_CAP) } else { FROZEN_CAP };
        self.moments[self.reached..].fill(frozen);
    }
}

/// Largest `|X|^2` a diverged path contributes, so that moment statistics stay finite.
const FROZEN_CAP: f64 = 1e100;

/// Euler scheme on the `2 dt` grid driven by the sums of the fine increments.
struct Shadow {
    x: Vec<f64>,
    scratch: Vec<f64>,
    t0: f64,
    h: f64,
    dw: f64,
    track: Track,
}

struct PathOutcome {
    fine: Track,
    coarse: Option<Track>,
    samples: Vec<StateSample>,
}

/// Pairwise (tree) summation over a slice in index order.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn with_workers<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

fn summarize(tracks: &[&Track], config: &SimulationConfig) -> SimResult {
    let kept: Vec<&Track> = tracks.iter().copied().filter(|t| !t.diverged).collect();
    let costs: Vec<f64> = kept.iter().map(|o| o.cost).collect();
    let (cost_mean, cost_stderr) = mean_and_stderr(&costs);
    let mut trace = Vec::with_capacity(CHECKPOINTS);
    let mut integrand_means = [0.0; CHECKPOINTS];
    for k in 0..CHECKPOINTS {
        let m: Vec<f64> = tracks.iter().map(|o| o.moments[k]).collect();
        let (mean, stderr) = mean_and_stderr(&m);
        trace.push(MomentPoint { t: config.horizon_t * (k + 1) as f64 / CHECKPOINTS as f64, mean, stderr });
        let f: Vec<f64> = kept.iter().map(|o| o.integrands[k]).collect();
        integrand_means[k] = mean_and_stderr(&f).0;
    }
    let truncation_bias_estimate = tail_estimate(&trace, integrand_means[CHECKPOINTS - 1], config.discount_r);
    SimResult {
        cost_mean,
        cost_stderr,
        second_moment_trace: trace,
        stationarity_residual: None,
        n_paths_used: kept.len(),
        n_paths_diverged: tracks.len() - kept.len(),
        truncation_bias_estimate,
        samples: Vec::new(),
        config: config.clone(),
        warnings: Vec::new(),
    }
}

fn overflow_check(result: SimResult) -> Result<SimResult> {
    if result.overflowed() {
        let fraction = result.n_paths_diverged as f64 / (result.n_paths_used + result.n_paths_diverged) as f64;
        return Err(Error::Overflow { fraction, result: Box::new(result) });
    }
    Ok(result)
}

/// Simulates every path at `config.dt`, and with `paired` also on the `2 dt` grid driven
/// by the same Brownian path.
fn run_paths(
    problem: &ProblemSpec,
    strategy: &FeedbackStrategy,
    config: &SimulationConfig,
    paired: bool,
) -> Result<Vec<PathOutcome>> {
    strategy.check_dims(problem.regimes_count(), problem.m, problem.n)?;
    config.validate(problem.n, problem.regimes_count())?;
    let cl = ClosedLoop::new(problem, strategy);
    let n = cl.n;
    let stepper = Stepper {
        n,
        a: &cl.a,
        c: &cl.c,
        drift: Some(&cl.drift),
        diffusion: Some(&cl.diffusion),
        dt: config.dt,
        horizon: config.horizon_t,
    };
    let r = config.discount_r;
    let discount = |t: f64| if r > 0.0 { (-r * t).exp() } else { 1.0 };
    let simulate_one = |index: usize| -> PathOutcome {
        let mut rng = path_rng(config.master_seed, index as u64);
        let chain = sample_chain_path(&problem.generator, config.i0, config.horizon_t, &mut rng);
        let x0 = config.x0.as_slice().to_vec();
        let mut state = x0.clone();
        let mut scratch = x0.clone();
        let mut fine = Track::new();
        let mut shadow = paired.then(|| Shadow {
            x: x0.clone(),
            scratch: x0.clone(),
            t0: 0.0,
            h: 0.0,
            dw: 0.0,
            track: Track::new(),
        });
        let record = index < config.record_paths;
        let mut samples = Vec::new();
        if record {
            samples.push(StateSample {
                path: index,
                t: 0.0,
                regime: config.i0,
                x: config.x0.clone(),
                u: cl.control(config.i0, &x0),
            });
        }
        let ok = stepper.run(&chain, &mut state, &mut scratch, &mut rng, |event, x| match event {
            StepEvent::Step { t, h, dw, regime, coarse_end } => {
                fine.cost += discount(t) * cl.integrand(regime, x) * h;
                if let Some(sh) = shadow.as_mut().filter(|s| !s.track.diverged) {
                    if sh.h == 0.0 {
                        sh.t0 = t;
                    }
                    sh.h += h;
                    sh.dw += dw;
                    if coarse_end {
                        sh.track.cost += discount(sh.t0) * cl.integrand(regime, &sh.x) * sh.h;
                        euler_step(
                            n,
                            &cl.a[regime],
                            &cl.c[regime],
                            Some(&cl.drift[regime]),
                            Some(&cl.diffusion[regime]),
                            &sh.x,
                            sh.h,
                            sh.dw,
                            &mut sh.scratch,
                        );
                        std::mem::swap(&mut sh.x, &mut sh.scratch);
                        sh.h = 0.0;
                        sh.dw = 0.0;
                        if escaped(&sh.x) {
                            sh.track.freeze(&sh.x);
                        }
                    }
                }
            }
            StepEvent::Checkpoint { k, t, regime } => {
                fine.checkpoint(k, discount(t) * cl.integrand(regime, x), x);
                if let Some(sh) = shadow.as_mut().filter(|s| !s.track.diverged) {
                    sh.track.checkpoint(k, discount(t) * cl.integrand(regime, &sh.x), &sh.x);
                }
                if record {
                    samples.push(StateSample {
                        path: index,
                        t,
                        regime,
                        x: Vector::from_column_slice(x),
                        u: cl.control(regime, x),
                    });
                }
            }
        });
        if !ok {
            fine.freeze(&state);
            // The coarse path is cut short with its partner.
            if let Some(sh) = shadow.as_mut().filter(|s| !s.track.diverged) {
                sh.track.freeze(&sh.x);
            }
        }
        PathOutcome { fine, coarse: shadow.map(|s| s.track), samples }
    };
    with_workers(config.workers, || (0..config.n_paths).into_par_iter().map(simulate_one).collect())
}

/// Simulates the closed loop `u = Theta X + nu` and estimates the (discounted) cost.
pub fn simulate_paths(problem: &ProblemSpec, strategy: &FeedbackStrategy, config: &SimulationConfig) -> Result<SimResult> {
    let outcomes = run_paths(problem, strategy, config, false)?;
    let tracks: Vec<&Track> = outcomes.iter().map(|o| &o.fine).collect();
    let mut result = summarize(&tracks, config);
    result.samples = outcomes.into_iter().flat_map(|o| o.samples).collect();
    if let Some(w) = config.step_warning(&LinearSystem::open_loop(problem)) {
        result.warnings.push(w);
    }
    overflow_check(result)
}

/// Cost estimates at `dt` and `dt / 2` on shared Brownian paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtHalving {
    /// Euler scheme at `config.dt`, driven by the fine increments summed in pairs.
    pub coarse: SimResult,
    /// Identical to [`simulate_paths`] at `config.dt / 2`.
    pub fine: SimResult,
    /// Mean of the per-path cost differences `fine - coarse` over paths kept in both.
    #[serde(with = "crate::model::serde_mat::nullable")]
    pub shift_mean: f64,
    #[serde(with = "crate::model::serde_mat::nullable")]
    pub shift_stderr: f64,
}

/// Measures the discretization shift of the cost estimate when `dt` is halved.
pub fn simulate_dt_halving(
    problem: &ProblemSpec,
    strategy: &FeedbackStrategy,
    config: &SimulationConfig,
) -> Result<DtHalving> {
    let fine_config = config.clone().with_dt(config.dt / 2.0);
    let outcomes = run_paths(problem, strategy, &fine_config, true)?;
    let fine_tracks: Vec<&Track> = outcomes.iter().map(|o| &o.fine).collect();
    let coarse_tracks: Vec<&Track> = outcomes.iter().filter_map(|o| o.coarse.as_ref()).collect();
    let mut fine = summarize(&fine_tracks, &fine_config);
    let coarse = overflow_check(summarize(&coarse_tracks, config))?;
    fine.samples = outcomes.iter().flat_map(|o| o.samples.iter().cloned()).collect();
    let fine = overflow_check(fine)?;
    let shifts: Vec<f64> = fine_tracks
        .iter()
        .zip(&coarse_tracks)
        .filter(|(f, c)| !f.diverged && !c.diverged)
        .map(|(f, c)| f.cost - c.cost)
        .collect();
    let (shift_mean, shift_stderr) = mean_and_stderr(&shifts);
    Ok(DtHalving { coarse, fine, shift_mean, shift_stderr })
}

/// Extrapolated tail `int_T^inf f dt ~ f(T) / kappa` with `kappa` the decay rate of the
/// second moment between the last two checkpoints (plus the discount rate).
fn tail_estimate(trace: &[MomentPoint], integrand_at_t: f64, r: f64) -> Option<f64> {
    let (prev, last) = (trace[trace.len() - 2], trace[trace.len() - 1]);
    if !(prev.mean > 0.0 && last.mean > 0.0) {
        return Some(0.0).filter(|_| integrand_at_t == 0.0);
    }
    let kappa = (prev.mean / last.mean).ln() / (last.t - prev.t) + r;
    (kappa > 0.0 && integrand_at_t.is_finite()).then(|| integrand_at_t / kappa)
}

/// Decay test: `E|X(T)|^2` below 5% of the trace maximum and the last three checkpoints
/// non-increasing up to two standard errors.
pub fn check_decay(result: &SimResult) -> bool {
    let trace = &result.second_moment_trace;
    if trace.len() < 3 || trace.iter().any(|p| !p.mean.is_finite()) {
        return false;
    }
    let max = trace.iter().map(|p| p.mean).fold(0.0, f64::max);
    let last = trace[trace.len() - 1];
    let below = last.mean <= 0.05 * max || max == 0.0;
    let tail = &trace[trace.len() - 3..];
    let monotone = tail.windows(2).all(|w| w[1].mean <= w[0].mean + 2.0 * w[1].stderr.max(w[0].stderr));
    below && monotone
}

/// Mean of `|N(P,alpha) u + L(P,alpha)^T x + rho~(alpha)|` over the recorded samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityCheck {
    pub residual: f64,
    pub mean_state_norm: f64,
    /// `residual <= 1e-9 (1 + mean |X|)`.
    pub consistent: bool,
}

pub fn stationarity_residual(
    problem: &ProblemSpec,
    p: &CoupledMatrixSet,
    adjoint: Option<&StationaryAdjoint>,
    samples: &[StateSample],
) -> StationarityCheck {
    let l = problem.regimes_count();
    let n_mats: Vec<Mat> = (0..l).map(|i| riccati::n_of(problem, p, i)).collect();
    let l_mats: Vec<Mat> = (0..l).map(|i| riccati::l_of(problem, p, i)).collect();
    let offsets: Vec<Vector> = (0..l)
        .map(|i| crate::synthesis::rho_tilde(problem, p, adjoint, i))
        .collect();
    let residuals: Vec<f64> = samples
        .iter()
        .map(|s| (&n_mats[s.regime] * &s.u + l_mats[s.regime].transpose() * &s.x + &offsets[s.regime]).norm())
        .collect();
    let norms: Vec<f64> = samples.iter().map(|s| s.x.norm()).collect();
    let count = samples.len().max(1) as f64;
    let residual = pairwise_sum(&residuals) / count;
    let mean_state_norm = pairwise_sum(&norms) / count;
    StationarityCheck { residual, mean_state_norm, consistent: residual <= 1e-9 * (1.0 + mean_state_norm) }
}

/// Attaches the stationarity residual of `p` to a simulation result.
pub fn with_stationarity(
    mut result: SimResult,
    problem: &ProblemSpec,
    p: &CoupledMatrixSet,
    adjoint: Option<&StationaryAdjoint>,
) -> SimResult {
    result.stationarity_residual = Some(stationarity_residual(problem, p, adjoint, &result.samples).residual);
    result
}

/// Monte Carlo estimate of `E int_0^T Phi^T Lambda(alpha) Phi dt` for the fundamental
/// matrix `Phi` started in regime `i0`; returns entry-wise mean and standard error.
pub fn fundamental_quadratic_integral(
    sys: &LinearSystem,
    lambda: &CoupledMatrixSet,
    i0: usize,
    config: &SimulationConfig,
) -> Result<(Mat, Mat)> {
    let n = sys.n();
    let mut cfg = config.clone();
    cfg.x0 = Vector::zeros(n);
    cfg.i0 = i0;
    cfg.validate(n, sys.regimes())?;
    let a: Vec<Vec<f64>> = sys.abar.iter().map(row_major).collect();
    let c: Vec<Vec<f64>> = sys.cbar.iter().map(row_major).collect();
    let stepper = Stepper { n, a: &a, c: &c, drift: None, diffusion: None, dt: cfg.dt, horizon: cfg.horizon_t };
    let simulate_one = |index: usize| -> Option<Vec<f64>> {
        let mut rng = path_rng(cfg.master_seed, index as u64);
        let chain = sample_chain_path(&sys.generator, i0, cfg.horizon_t, &mut rng);
        let mut state = Mat::identity(n, n).as_slice().to_vec();
        let mut scratch = state.clone();
        let mut acc = Mat::zeros(n, n);
        let ok = stepper.run(&chain, &mut state, &mut scratch, &mut rng, |event, phi| {
            if let StepEvent::Step { h, regime, .. } = event {
                let phi = Mat::from_column_slice(n, n, phi);
                acc += phi.transpose() * &lambda[regime] * phi * h;
            }
        });
        ok.then(|| acc.as_slice().to_vec())
    };
    let outcomes: Vec<Option<Vec<f64>>> =
        with_workers(cfg.workers, || (0..cfg.n_paths).into_par_iter().map(simulate_one).collect())?;
    let kept: Vec<&Vec<f64>> = outcomes.iter().flatten().collect();
    let diverged = outcomes.len() - kept.len();
    if diverged as f64 >= OVERFLOW_FRACTION * outcomes.len() as f64 {
        return Err(Error::Precondition(format!("{diverged} fundamental-matrix paths overflowed")));
    }
    let mut mean = Mat::zeros(n, n);
    let mut stderr = Mat::zeros(n, n);
    for e in 0..n * n {
        let vals: Vec<f64> = kept.iter().map(|v| v[e]).collect();
        let (m, s) = mean_and_stderr(&vals);
        mean.as_mut_slice()[e] = m;
        stderr.as_mut_slice()[e] = s;
    }
    Ok((mean, stderr))
}
