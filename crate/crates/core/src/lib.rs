//! Language-embedded 3D Gaussian splatting on the CPU.

pub mod checkpoint;
pub mod cli;
pub mod density;
pub mod error;
pub mod formats;
pub mod eval;
pub mod heads;
pub mod image;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod quantizer;
pub mod query;
pub mod raster;
pub mod real;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
