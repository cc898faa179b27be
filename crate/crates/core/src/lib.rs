pub mod autodiff;
pub mod blocks;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod latent_graph;
pub mod layers;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{DmpsError, Result};
pub use tensor::Tensor;
