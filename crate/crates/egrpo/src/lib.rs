//! Experiment harness for entropy-aware GRPO on toy flow-matching tasks:
//! configuration, checkpoints, CSV/SVG emission and the CLI subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod document;
pub mod error;
pub mod svg;

pub use config::ExperimentConfig;
pub use egrpo_core as core;
pub use error::{HarnessError, Result};
