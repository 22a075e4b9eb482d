//! Command-line front end: configuration, artifacts and subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::{print_error, CliError};
