//! U-Net classifier with explicit forward and backward passes.

pub mod conv;
mod loss;
mod optim;
mod scalar;
mod state;
mod unet;

pub use loss::{head_counts, softmax, softmax_cross_entropy};
pub use optim::{lr_at, sgd_step};
pub use scalar::{gemm, Scalar};
pub use state::{xavier_init, ModelState};
pub use unet::{forward, loss_and_grad, skip_channels, xavier_layer, xavier_params, ConvSpec, UNetConfig};
