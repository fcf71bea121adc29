//! Files, training loops and the command line around `faster-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod trainer;

pub use error::{LabError, Result};
