//! Dense tensors, layers with hand-written gradients, and the denoiser U-Net.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod model_file;
pub mod objective;
pub mod real;
pub mod tensor;
pub mod unet;

pub use adam::{adam_step, OptimizerState};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckOptions, GradCheckReport};
pub use layers::{Activation, LayerKind, ParamBlock};
pub use objective::{loss_and_grads, loss_with_draws, Draws, LossNorm, LossOutput};
pub use real::Real;
pub use tensor::Tensor4;
pub use unet::{Architecture, DenoiserNet, Init, Norm};
