//! Viability and discriminating kernels for a constant-velocity race-car
//! path-planning model, and a receding-horizon planner built on them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod planner;
pub mod ppmodel;
pub mod scenario;
pub mod sim;
pub mod track;
pub mod vehicle;

pub use error::{Error, Result};
