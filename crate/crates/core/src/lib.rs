pub mod analysis;
pub mod attention3d;
pub mod autograd;
pub mod drformer;
pub mod error;
pub mod nn;
pub mod sdrformer;
pub mod trainer;
pub mod volforge;

pub use error::{Error, Result};
