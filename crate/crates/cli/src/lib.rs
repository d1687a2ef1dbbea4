//! Experiment runner for debiased partial-posterior estimation: dataset
//! generation, decay pilots, exponent tuning, debiased runs, convergence
//! tables and streaming comparisons.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod setup;

pub use commands::{cmd_convergence, cmd_generate, cmd_pilot, cmd_run, cmd_stream, cmd_tune};
pub use config::ExperimentConfig;
pub use error::{exit, CliError};
