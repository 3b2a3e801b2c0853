//! Minimal dense 4-axis tensor with forward and backward implementations of
//! every layer the detection model needs.
//!
//! There is no graph autodiff here: each layer caches what its own backward
//! pass needs, and composite structures (the model, the losses) wire the
//! chain rule by hand. Every backward implementation is checked against
//! central finite differences, see [`gradcheck`].

mod checkpoint;
mod conv;
mod norm;
mod pointwise;
mod pool;
mod tensor;

pub mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::BatchNorm2d;
pub use pointwise::{add, mul, relu, relu_backward, sigmoid, sigmoid_backward, softmax_channels, softmax_channels_backward};
pub use pool::AvgPool2d;
pub use tensor::{Param, Tensor4};

/// Forward-pass mode. `Train` makes layers cache activations for backward
/// and batch-norm use batch statistics; `Eval` skips caching and uses
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
