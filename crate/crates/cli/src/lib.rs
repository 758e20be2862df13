//! Experiment runner for stochastic attention models: declarative run
//! configuration, the `train`/`eval`/`dump-attention` commands, and the
//! numerical verification suites behind `verify`.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod verify;

pub use error::{CliError, Result};
