//! Experiment runner, oracle suites and CLI plumbing on top of `zsrl-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod run;
pub mod verify;

pub use error::{LabError, LabResult};
