//! Drift-aware PTQ calibration pipeline: dataset generation, the three
//! calibration stages, closed-loop evaluation, model containers and reports.

pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod report;
pub mod workflow;

pub use config::CalibConfig;
pub use error::{PipelineError, Result};
