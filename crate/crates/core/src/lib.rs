//! Controlled evaluation of attribution methods on small CNNs.

pub mod aggatt;
pub mod analysis;
pub mod attribution;
pub mod cli;
pub mod data;
pub mod error;
pub mod grids;
pub mod lrp;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
