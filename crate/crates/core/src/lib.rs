//! Learned dynamic tracking-error tubes for a planner/tracker model pair and
//! a Dynamic Tube MPC that plans through cluttered 2D worlds with them.
//!
//! Pipeline: [`datagen`] simulates randomized tracker rollouts against shaped
//! planner references, [`tube`] fits a quantile tube model on top of the
//! [`neural`] primitives, and [`planner`] solves nominal / fixed-tube /
//! dynamic-tube MPC by sequential convex programming and closes the loop on
//! the surrogate plant from [`sim`]. [`harness`] wires it into experiments.

pub mod datagen;
pub mod error;
pub mod harness;
pub mod neural;
pub mod planner;
pub mod rng;
pub mod sim;
pub mod table;
pub mod tube;

pub use error::{Error, Result};
