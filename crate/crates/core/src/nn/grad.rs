use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients produced by one backward call.
#[derive(Clone, Debug)]
pub struct Grads {
    /// Gradient with respect to the operator input.
    pub input: Tensor,
    /// Gradients for the operator's parameters, in the operator's documented order.
    pub params: Vec<Tensor>,
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Grads> + Send + Sync>;

/// Forward output of a differentiable operator and its backward map.
pub struct GradPair {
    pub output: Tensor,
    backward: BackwardFn,
}

impl core::fmt::Debug for GradPair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GradPair")
            .field("output", &self.output.shape())
            .finish_non_exhaustive()
    }
}

impl GradPair {
    pub fn new(output: Tensor, backward: impl Fn(&Tensor) -> Result<Grads> + Send + Sync + 'static) -> Self {
        GradPair {
            output,
            backward: Box::new(backward),
        }
    }

    /// Runs the backward map. `upstream` must have the output's shape.
    pub fn backward(&self, upstream: &Tensor) -> Result<Grads> {
        if upstream.shape() != self.output.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: self.output.shape(),
                found: upstream.shape(),
            });
        }
        (self.backward)(upstream)
    }
}
