//! Experiment harness, file formats and command-line front end for the
//! forward/inverse filters in [`ifk_core`].

pub use ifk_core as core;

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod plot;
pub mod presets;
pub mod report;

pub use bench::{run_experiment, ExperimentResult, Series};
pub use config::ExperimentConfig;
pub use error::{IfkError, Result};
