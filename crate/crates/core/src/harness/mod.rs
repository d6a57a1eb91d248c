//! Experiment orchestration: configuration, run directories, multi-seed
//! aggregation and the table/plot-data files.

mod config;
mod diag;
mod report;
mod runner;

pub use config::*;
pub use diag::*;
pub use report::*;
pub use runner::*;
