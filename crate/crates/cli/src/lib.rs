//! Command line and HTTP front ends for the `ovam-core` toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod ops;
pub mod service;

pub use commands::{run, Cli};
pub use config::Config;
pub use error::{CliError, CliResult};
