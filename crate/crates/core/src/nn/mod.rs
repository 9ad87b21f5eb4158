//! Layer kernels with hand-written backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod loss;
pub mod pool;

pub use activation::{prelu_backward, prelu_forward, PreluParams};
pub use batchnorm::{batchnorm, batchnorm_backward, batchnorm_forward, batchnorm_update_running, BatchNormParams, BnCache};
pub use conv::{asymmetric_conv5, conv2d_backward, conv2d_forward, ConvParams, ConvSpec, Padding, ALLOWED_KERNELS};
pub use dropout::{check_rate, spatial_dropout, spatial_dropout_backward, DropoutMask};
pub use loss::{inverse_frequency_weights, pixel_accuracy, pixel_cross_entropy};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, maxunpool2x2, maxunpool2x2_backward, PoolIndices};

/// Training uses batch statistics and dropout; inference uses running
/// statistics and no dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}
