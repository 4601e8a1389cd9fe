//! Experiment runner behind the `vlmkg` binary: configuration handling, run
//! directories, and the corpus → train → decode → score pipeline with its
//! ablation sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{exit, CliError, Result};
