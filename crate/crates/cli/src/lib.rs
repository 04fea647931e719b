//! Orchestration for the `lexshort` command: run configuration, the
//! subcommands and exit-code mapping.

pub mod cli;
pub mod commands;
pub mod config;
pub mod exit;
pub mod plot;

pub use config::RunConfig;
pub use exit::{exit_code, Usage};
