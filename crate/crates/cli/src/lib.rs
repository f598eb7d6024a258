//! Command-line surface of the epsilon pipeline: configuration parsing and
//! the `gen`, `train`, `eval`, `predict`, `attn` and `sweep` commands.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
