//! File formats, run configuration and subcommand pipelines for the `idw`
//! command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
