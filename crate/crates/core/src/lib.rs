//! Content-based image retrieval at desk scale: a single-backbone network
//! that pools several intermediate layers into one embedding, triplet
//! training for it, a random-projection forest for approximate neighbour
//! search, and an incremental per-partition catalog pipeline.

pub mod ann;
mod binio;
pub mod catalog;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
