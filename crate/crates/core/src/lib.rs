pub mod cluster;
pub mod data;
pub mod dropout;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Matrix;
