//! Experiment pipelines and artifact emission behind the `ctkit` binary.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipelines;

pub use error::{CliError, CliResult};
