//! Forward-backward stochastic Volterra integral equations with jumps.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: time grid, kernels, discrete Lévy measure and validated scenarios.
//! - [`paths`]: seeded Brownian increments and compound-Poisson jump counts.
//! - [`fsvie`]: forward Volterra simulation, its deterministic mean and first variations.
//! - [`condexp`]: least-squares conditional expectations.
//! - [`bsde`]: regression backward Euler for BSDEs with jumps, recursive utility.
//! - [`bsvie`]: Picard iteration for backward Volterra equations in a weighted norm.
//! - [`malliavin`]: a small functional calculus and duality-formula verifiers.
//! - [`control`]: adjoints, Hamiltonians, optimal consumption and performance estimators.
//! - [`acceptance`]: end-to-end numerical checks shared by the test suite and the CLI.
//! - [`cli`]: JSON configs, CSV output, run reports and the command-line driver.
//!
//! Runnable walkthroughs for each capability live under `examples/`.

// `!(x > 0.0)` rejects NaN on purpose; index loops mirror the grid formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acceptance;
pub mod bsde;
pub mod bsvie;
pub mod cli;
pub mod condexp;
pub mod control;
pub mod error;
pub mod fsvie;
pub mod malliavin;
pub mod model;
pub mod paths;
pub mod stats;

pub use error::{Error, Result};
