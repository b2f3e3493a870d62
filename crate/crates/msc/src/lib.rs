//! File formats, experiment persistence and the pipeline commands driving
//! `msc-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
