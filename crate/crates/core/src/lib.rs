pub mod config;
pub mod dataset;
pub mod error;
pub mod experts;
pub mod features;
pub mod gating;
pub mod geometry;
pub mod io;
pub mod localize;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod splat;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
