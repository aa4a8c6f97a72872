//! Command implementations behind the `speech-quality` binary: `simulate`,
//! `train`, `predict` and `eval`.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
