//! Zero-shot reinforcement learning on tabular MDPs.
//!
//! The crate covers the full pipeline at desk scale: exact MDP solvers,
//! Gaussian and sparse reward priors, linear task encoders, three estimators
//! of the zero-shot loss, exact and temporal-difference occupancy models,
//! feature training, and a variance-penalized loss.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoding;
pub mod error;
pub mod feature_opt;
pub mod generators;
pub mod linalg;
pub mod loss;
pub mod mdp;
pub mod occupancy;
pub mod priors;
pub mod rng;
pub mod stats;
pub mod variance;

pub use error::{Error, Result};
