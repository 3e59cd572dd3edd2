//! Command-line driver: config parsing, run manifests, preprocessing and
//! image export behind the `stm` binary's subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod manifest;
pub mod prep;

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};
pub use error::CliError;
