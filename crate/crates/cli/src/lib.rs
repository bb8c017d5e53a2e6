//! Command-line harness: TOML configs, partition files, per-round CSV
//! streams and cross-method reports.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod partition_file;
pub mod report;

pub use cli::{command, run_cli};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
