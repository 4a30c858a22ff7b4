//! Configuration-driven experiment runner behind the `ibed` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{posterior_pipeline, run, Command, PosteriorRun, RunContext};
pub use config::ExperimentConfig;
pub use error::CliError;
