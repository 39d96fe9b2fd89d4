//! Parameter management and the basic layers models are assembled from.

mod layers;
mod params;

pub use layers::*;
pub use params::*;
