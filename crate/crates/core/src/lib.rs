//! Bidirectional recurrent feature propagation for moving infrared small
//! target detection.

pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod blocks;
pub mod config;
pub mod detection;
pub mod eval;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod propagation;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
