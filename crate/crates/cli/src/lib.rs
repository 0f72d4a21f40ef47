//! Experiment harness for meta-learned reward models: data generation,
//! meta-training, adaptation, evaluation, sweeps, and gradient checks, all
//! seeded and written as plain-text artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, Result};
