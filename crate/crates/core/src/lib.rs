//! Nonlinear filtering workbench.
//!
//! Implements deep density filters (deep splitting and deep BSDE, in plain and
//! logarithmic form) together with classical baselines (Kalman, extended Kalman,
//! ensemble Kalman, bootstrap particle filter) on a reproducible SDE model zoo,
//! with normalizing-constant estimation and the error metrics used to benchmark
//! them (FME, MAE, rMAE, KLD, NLL).

pub mod error;
pub mod events;
pub mod fd;
pub mod models;
pub mod nn;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
