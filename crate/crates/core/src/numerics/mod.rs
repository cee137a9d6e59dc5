//! Minimal feed-forward network machinery shared by every learned component:
//! forward pass with cached activations, exact hand-written backward pass,
//! Adam updates, diagonal-Gaussian distributions, and `.farlnet` checkpoints.

mod adam;
mod checkpoint;
mod gaussian;
mod mlp;

pub use adam::{optimizer_step, OptimizerState};
pub use checkpoint::{load_farlnet, save_farlnet};
pub use gaussian::{DiagonalGaussian, LOG_STD_MAX, LOG_STD_MIN};
pub use mlp::{
    Activation, BackwardResult, ForwardTrace, NetworkParams, NetworkSpec, OutputTransform,
};
