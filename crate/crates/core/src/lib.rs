//! Multi-label recognition from partially labelled images.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod csrl;
pub mod error;
pub mod heads;
pub mod iprb;
pub mod labelspace;
mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pprb;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use labelspace::LabelMatrix;
