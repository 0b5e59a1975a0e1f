//! Command-line side of the vulnerability detector: file formats,
//! checkpoints, run configurations, reports and the pipeline runs.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
