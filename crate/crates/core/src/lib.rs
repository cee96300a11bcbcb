//! Personalized federated learning with backbone self-distillation, on
//! small dense networks: a shared backbone is averaged on the server while
//! each client keeps a private head and distills the global backbone into its
//! own.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
