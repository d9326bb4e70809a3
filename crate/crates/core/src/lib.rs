pub mod diffgraph;
pub mod edm;
pub mod error;
pub mod metrics;
pub mod nifti;
pub mod sampler;
pub mod sr25d;
pub mod sr3d;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
