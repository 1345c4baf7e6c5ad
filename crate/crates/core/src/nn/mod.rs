//! Neural stack: tensors, layers with hand-written backward passes, the
//! valid-padding U-Net and the three model variants.

pub mod batch_renorm;
pub mod conv;
pub mod conv_lstm;
pub mod gradcheck;
pub mod model;
pub mod ops;
mod params;
mod real;
mod tensor;
pub mod unet;

pub use batch_renorm::{NormMode, RenormClip};
pub use conv::Padding;
pub use model::{Model, ModelConfig, ModelInput, ModelVariant};
pub use params::{is_running_stat, ModelParams};
pub use real::Real;
pub use tensor::Tensor;
pub use unet::{output_margin, UNetConfig};
