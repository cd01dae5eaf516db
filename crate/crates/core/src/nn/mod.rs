//! Differentiable layer kernels: forward passes return caches, backward
//! passes accumulate parameter gradients and return input gradients.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;

pub use activation::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, softmax_cross_entropy,
    CrossEntropy,
};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BNParams, BnCache, BnGrads};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_cached, ConvCache, ConvParams};
pub use linear::{linear_backward, linear_forward, LinearParams};
