//! Neural-network operators. Every differentiable operator returns a
//! [`GradPair`]: its output plus a closure mapping an upstream gradient to
//! the input gradient and the parameter gradients.

mod activation;
mod conv;
mod finite_diff;
mod grad;
mod linear;
mod norm;
mod pool;
mod softmax;

pub use activation::{relu, sigmoid};
pub use conv::{conv2d, Conv2dParams};
pub use finite_diff::{finite_difference_gradient, max_relative_error, REL_ERR_FLOOR};
pub use grad::{GradPair, Grads};
pub use linear::{linear, LinearParams};
pub use norm::{batch_norm, BatchNormParams, BatchStats};
pub use pool::{global_avg_pool, global_avg_pool_op, max_pool};
pub use softmax::softmax_over_scales;
