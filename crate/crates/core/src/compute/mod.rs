//! Tensors, deterministic RNG and hand-written forward/backward kernels.
//!
//! Kernels are single-threaded pure functions; with fixed inputs they are
//! bit-reproducible across runs.

mod activation;
mod batchnorm;
mod conv;
mod gradcheck;
mod init;
mod linear;
mod loss;
mod param;
mod pool;
mod real;
mod rng;
mod sgd;
mod tensor;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batchnorm, batchnorm_backward, BnCache, BnConfig, BnState, Mode};
pub use conv::{conv2d, conv2d_backward, ConvGeom};
pub use gradcheck::{grad_check, grad_check_step, FD_STEP};
pub use init::he_init;
pub use linear::{linear, linear_backward};
pub use loss::softmax_cross_entropy;
pub use param::Parameter;
pub use pool::{
    avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward, max_pool,
    max_pool_backward,
};
pub use real::{axpy, dot, sum_f64, Real};
pub use rng::{Rng, RngState};
pub use sgd::sgd_update;
pub use tensor::Tensor;
