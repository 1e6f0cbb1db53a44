//! Forward and backward kernels on [`Tensor`](crate::Tensor)s.
//!
//! Every kernel is a pure function of its arguments. Optimised paths have a
//! naive twin in [`oracle`] that the test suites compare against.

pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod oracle;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_forward, ConvGrads, ConvParams, ConvSpec};
pub use elementwise::{
    add, channel_scale, channel_scale_backward, dropout, mul, relu, relu_backward, sigmoid, sigmoid_backward,
    sigmoid_scalar, Mode,
};
pub use loss::{cross_entropy_per_row, softmax_cross_entropy, softmax_cross_entropy_backward, softmax_rows};
pub use norm::{
    batch_norm_inference, batch_norm_inference_backward, batch_norm_train, batch_norm_train_backward, batch_stats,
    batchnorm2d, update_running, BatchNormParams, BatchStats, NormCache, NormGrads, NormMode,
};
pub use oracle::{conv2d_oracle, FlopCounter};
pub use pool::{adaptive_avg_pool_1x1, adaptive_avg_pool_1x1_backward};
