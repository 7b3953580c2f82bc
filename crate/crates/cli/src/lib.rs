//! Experiment configuration and drivers behind the `qkdprov` binary.

pub mod config;
pub mod harness;

pub use config::{ExperimentConfig, SweepVariable};
pub use harness::{HarnessError, Instance};
