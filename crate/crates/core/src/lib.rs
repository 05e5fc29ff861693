pub mod error;
pub mod evaluator;
pub mod features;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sparse_depth;
pub mod synth;

pub use error::{Error, Result};
