//! Dense reverse-mode differentiation with the optimizer and schedule used
//! for training.

pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{Adam, OptimizerState, ReduceLrOnPlateau};
pub use params::{glorot_uniform, BoundParams, ParamGrads, ParamStore};
pub use tape::{sigmoid, softmax_rows, softplus, Activation, Gradients, NodeId, Tape};
