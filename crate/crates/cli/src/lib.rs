//! Command-line driver: configuration, commands and run manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{replay, run, Command, Outcome};
pub use config::ExperimentConfig;
pub use error::ConfigError;
