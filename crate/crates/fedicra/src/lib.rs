//! Std companion of `fedicra-core`: configuration, file formats, the run
//! directory and site-parallel execution.

pub mod config;
pub mod dataset;
mod error;
pub mod executor;
pub mod pgm;
pub mod runner;
pub mod snapshot;

pub use error::{Error, Result};
