//! Divide-and-conquer policy optimization over partitioned initial-state
//! distributions, with TRPO baselines and an experiment harness.

pub mod checkpoint;
pub mod config;
pub mod dnc;
pub mod envs;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod policy;
pub mod rng;
pub mod trpo;

pub use error::{DncError, Result};
