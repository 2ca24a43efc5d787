pub mod confidence;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod rnnt;
pub mod weighting;

pub use error::{Error, Result};
