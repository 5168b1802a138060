//! File formats, checkpoints and the command-line pipeline around `step-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod synth;
pub mod tracking;
pub mod training;

pub use error::{Error, Result};
