//! Metrics, persistence, run configuration and the experiment harnesses.

pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod metrics;
