pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, Scalar, Tensor};
pub mod decoder;
pub mod fusion;
pub mod geo;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod nn;
pub mod objectives;
pub mod ssl;
pub mod swin;
pub mod checkpoint;
pub mod cli;
pub mod train;
pub mod synthetic;
pub mod config;
