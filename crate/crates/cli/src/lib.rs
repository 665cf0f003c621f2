//! Configuration and subcommands behind the `fedasync` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::CliError;
