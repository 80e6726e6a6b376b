//! Command implementations for the `gaitrdae` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod pgm;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
