//! Forward and backward implementations of every tensor operation used by the
//! encoder, the attention blocks and the classifier.

pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod kink;
pub mod ops;
pub mod optim;

pub use conv::{BatchNorm, ConvBlock, BN_EPS, BN_MOMENTUM};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckTarget, GradReport, ParamError};
pub use ops::{
    global_avg_pool, global_avg_pool_backward, linear, relu, relu_backward, resize_bilinear,
    resize_bilinear_backward, sigmoid, sigmoid_backward, slap, slap_backward, softmax_cross_entropy,
    softmax_rows, upsample_nearest, upsample_nearest_backward, Linear,
};
pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig};
