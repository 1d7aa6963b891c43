//! Dual-branch weakly supervised lesion segmentation.

pub mod autograd;
pub mod checkpoint;
pub mod cross_attention;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod guidance;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod pseudo;
pub mod raster;
pub mod synthetic;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
