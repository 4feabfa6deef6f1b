//! Experiment orchestration: configuration, the round loop, metrics, and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod runner;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use metrics::{RoundMetrics, CSV_HEADER};
pub use runner::{evaluate, run, RunResult, Simulation};
