//! Training harness, file formats and command line for target-aware
//! transformer distillation, built on `tat-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod export;
pub mod harness;
pub mod idx;

pub use error::{Error, Result};
