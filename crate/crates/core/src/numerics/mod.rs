//! Minimal dense-tensor engine: the exact forward/backward layers the
//! point-cloud classifier needs, the AdamW optimizer, and a finite-difference
//! gradient checker. Everything computes in f64.

pub mod adamw;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adamw::{adamw_step, AdamWState};
pub use gradcheck::grad_check;
pub use layers::{
    batchnorm_backward, batchnorm_forward, cross_entropy, cross_entropy_backward, linear_backward,
    linear_forward, max_pool_points, max_pool_points_backward, relu_backward, relu_forward,
    softmax, softmax_entropy, softmax_entropy_backward, BatchNormCache, NormMode, RunningStats,
};
pub use params::{GradSet, ParamSet};
pub use tensor::{Dtype, Tensor};
