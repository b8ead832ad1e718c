//! Command-line runner and HTTP service for glyco pipelines.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod service;

pub use commands::{run, Cli, Command};
pub use error::CliError;
