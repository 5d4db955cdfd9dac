//! Robust safety-critical traffic control for a mixed platoon of one
//! connected automated vehicle (CAV) and human-driven vehicles.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`] — optimal-velocity car following, equilibria and the
//!   linearised platoon matrices;
//! - [`numkernel`] — matrix exponential, Lyapunov/Riccati solvers, symmetric
//!   eigenvalues;
//! - [`history`] — uniform-grid delay buffers and history quadrature;
//! - [`predictor`] and [`observer`] — actuator-delay compensation and the
//!   predictor-observer for delayed partial measurements;
//! - [`safety`] and [`qp`] — barrier-function constraints on the CAV command
//!   and the safety-filter quadratic program;
//! - [`sim`] and [`sweep`] — closed-loop simulation and safety-region sweeps;
//! - [`config`] and [`cli`] — TOML run configuration and the command-line
//!   front end.

// `!(x > 0.0)` is deliberate throughout: NaN has to fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod history;
pub mod model;
pub mod numkernel;
pub mod observer;
pub mod predictor;
pub mod qp;
pub mod safety;
pub mod sim;
pub mod sweep;

pub use error::{Error, Result};
