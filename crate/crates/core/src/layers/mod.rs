pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod pool;
pub mod residual;

pub use activation::Relu;
pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, Padding};
pub use linear::{Flatten, Linear};
pub use pool::{AvgPool2d, MaxPool2d};
pub use residual::ResidualBlock;

/// Forward-pass mode.
///
/// `train_bn` selects batch statistics (and updates the running estimates);
/// `record` keeps the activation caches that backward needs. They are
/// independent because a frozen trunk evaluated with running statistics can
/// still sit *above* trainable layers, in which case gradients must flow
/// through it even though its own statistics stay fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub train_bn: bool,
    pub record: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { train_bn: true, record: true };
    pub const EVAL: Mode = Mode { train_bn: false, record: false };
    /// Running statistics, but caches kept so backward can pass through.
    pub const FROZEN_BACKPROP: Mode = Mode { train_bn: false, record: true };
}
