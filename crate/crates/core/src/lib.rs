//! Infinite-horizon stochastic linear-quadratic control of Markov regime-switching
//! linear systems.
//!
//! The crate covers the whole pipeline on small dense instances:
//!
//! - [`model`]: problem data, validation and bit-exact JSON artifacts
//! - [`stability`]: coupled Lyapunov equations and L2-stability certificates
//! - [`riccati`]: stabilizer synthesis and the coupled Riccati solvers
//! - [`synthesis`]: optimal strategies, value functions, discounted problems
//! - [`mcsim`]: Monte Carlo validation of the closed loop
//! - [`cli`]: the `mjlq` command-line front end
//!
//! ```no_run
//! use mjlq::{model, riccati, synthesis};
//!
//! let problem = model::load_problem("data/scalar_regimes.json")?;
//! let care = riccati::solve_care(&problem, &Default::default())?;
//! let strategy = synthesis::build_closed_loop(&problem, &care)?;
//! println!("P = {:?}, Theta = {:?}", care.p, strategy.theta);
//! # Ok::<(), mjlq::Error>(())
//! ```

pub mod cli;
pub mod error;
pub mod linalg;
pub mod mcsim;
pub mod model;
pub mod riccati;
pub mod stability;
pub mod synthesis;

pub use error::{Error, Result};
pub use mcsim::{SimResult, SimulationConfig};
pub use model::{CoupledMatrixSet, FeedbackStrategy, Generator, ProblemSpec, RegimeData};
pub use riccati::{CareOptions, CareSolution, SolveReport};
pub use stability::{LinearSystem, StabilityCertificate};
pub use synthesis::{StationaryAdjoint, ValueReport};
