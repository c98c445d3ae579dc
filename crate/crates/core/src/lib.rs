#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Simulation and empirical stability certification for switched,
//! time-varying nonlinear systems with inputs.

pub mod certify;
pub mod comparison;
pub mod error;
pub mod falsify;
pub mod integrator;
pub mod scenario;
pub mod signals;
pub mod systems;

pub use error::{Error, Result};
