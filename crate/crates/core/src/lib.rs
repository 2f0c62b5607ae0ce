//! Few-shot fine-grained classification with bidirectional symmetric
//! cross-attention between support and query feature maps.

pub mod data;
pub mod error;
pub mod heatmap;
pub mod helix;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
