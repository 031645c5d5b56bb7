//! Std companion to `adafuse-core`: dataset and checkpoint file formats,
//! CSV/JSON exports, run configuration and parallel fold execution.

pub use adafuse_core as core;

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod manifest;
pub mod run;

pub use error::{Error, Result};
