//! File formats, run configuration, the HTTP prompt generator and the
//! subcommands behind the `brainroi` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod http;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
