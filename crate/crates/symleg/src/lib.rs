//! Inverse dynamics learning for radially symmetric legged robots.
//!
//! The crate has three layers. The bottom is an analytic rigid-body stack:
//! spatial algebra, robot models with circularly repeated legs, and a
//! recursive Newton-Euler / composite-rigid-body oracle that labels torques
//! and drives a small contact simulator. The middle layer expresses robot
//! states in per-leg frames so that gravity-axis rotations, translations and
//! cyclic leg relabelings act trivially on the features, and checks those
//! group actions numerically. The top layer trains torque models (flat MLP,
//! shared-leg deep sets, graph networks) on oracle-labeled climbing data with
//! a from-scratch reverse-mode tape, and evaluates how much of the symmetry
//! each architecture actually exploits.

pub mod cli;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod models;
pub mod nn;
pub mod repr;
pub mod robot;
pub mod sim;
pub mod spatial;
pub mod symmetry;

pub use error::{Error, Result};
