//! File formats, run directories, reports and the command-line driver built
//! on `groundlab-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod report;
pub mod run;
pub mod svg;

pub use error::{LabError, LabResult};
