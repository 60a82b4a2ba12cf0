//! Differentially-private distributed model predictive control for linear
//! discrete-time subsystems coupled by global linear constraints.
//!
//! The crate simulates a group of agents that each solve a local
//! finite-horizon optimal control problem and coordinate through dual
//! prices on a shared constraint. Two distributed optimizers are
//! provided: a plain dual-gradient scheme whose messages leak the
//! agents' constraint values to an eavesdropper, and a noise-injecting
//! variant with a diminishing weakening factor that keeps the iterates
//! convergent while achieving a finite differential-privacy budget.
//! Around the optimizers sit a privacy accountant, an eavesdropping
//! attack for the plain scheme, a privacy-preserving average-consensus
//! check for global feasibility, and closed-loop engines with a
//! shift-based fallback that preserves recursive feasibility.
//!
//! Entry points:
//! - [`config::parse_config`] loads and validates a JSON experiment file;
//! - [`mpc::run_closed_loop`] runs one closed-loop simulation;
//! - [`experiment::run_experiment`] runs the Monte Carlo study and emits
//!   CSV artifacts (also exposed through the `dp-dmpc` binary);
//! - the `examples/` directory has one runnable example per capability.

pub mod model;
pub mod numerics;

pub use numerics::{Matrix, Vector};
