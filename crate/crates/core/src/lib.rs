pub mod data;
pub mod encoder;
pub mod error;
pub mod kernels;
pub mod likelihoods;
pub mod linalg;
pub mod metrics;
pub mod sim;
pub mod svgp;
pub mod trainer;

pub use error::{Error, Result};
