//! Deterministic differentiable operators: forward kernels, analytic
//! gradients, Adam and Gaussian initialization.
//!
//! Frozen networks may be evaluated from many threads through
//! [`Sequential::infer`]; [`Sequential::forward`] and [`Sequential::backward`]
//! mutate the network and belong to a single training controller.

pub mod adam;
pub mod init;
pub mod layers;
pub mod loss;
pub mod sequential;

pub use adam::{adam_step, AdamState};
pub use init::{gaussian_init, INIT_STD};
pub use layers::{
    avg_pool2d, batchnorm2d, conv2d, dense, global_avg_pool, leaky_relu, BatchNorm2d, Conv2d,
    Dense, Mode,
};
pub use loss::{sigmoid, sigmoid_bce, softmax_ce, LossOutput};
pub use sequential::{Gradients, Layer, Sequential};

/// Negative-side slope used by every LeakyReLU in the model zoo.
pub const LEAKY_ALPHA: f64 = 0.2;
