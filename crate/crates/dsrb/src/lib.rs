//! Experiment harness around [`dsrb_core`]: configuration files, dataset
//! loading, checkpointed training runs, sweeps and report rendering.

pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod report;

pub use config::{DatasetConfig, ExperimentConfig};
pub use dsrb_core;
pub use error::{Error, Result};
pub use harness::{Dataset, Method, RunSpec};
pub use report::Report;
