//! Unsupervised per-point distinctiveness on point-cloud shape collections.

pub mod apps;
pub mod clustering;
pub mod commands;
pub mod distinct;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
