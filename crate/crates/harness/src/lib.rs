//! Configuration, artifacts and experiment drivers for the `lfmcw` command.

pub mod ablation;
pub mod artifacts;
pub mod commands;
pub mod config;
pub mod convert;
pub mod error;
pub mod genotype;
pub mod plot;
pub mod verify;

pub use error::{HarnessError, Result};
