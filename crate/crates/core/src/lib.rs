pub mod beamforming;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod localization;
pub mod models;
pub mod neural;
pub mod pipeline;
pub mod scene;
pub mod seed;
pub mod tensor_file;

pub use error::{Error, Result};
