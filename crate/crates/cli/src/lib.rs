//! Configuration, orchestration and reporting for the `foodcl` command.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod tables;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
