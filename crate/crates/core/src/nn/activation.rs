use alloc::vec::Vec;

use super::grad::{GradPair, Grads};
use crate::error::Result;
use crate::tensor::Tensor;

/// Rectified linear unit, `max(0, x)`. The subgradient at 0 is taken as 0.
pub fn relu(x: &Tensor) -> Result<GradPair> {
    let output = x.map(|v| v.max(0.0));
    let input = x.clone();
    Ok(GradPair::new(output, move |g| {
        Ok(Grads {
            input: input.zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?,
            params: Vec::new(),
        })
    }))
}

#[inline]
pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// Logistic sigmoid, `1 / (1 + e^-x)`.
pub fn sigmoid(x: &Tensor) -> Result<GradPair> {
    let output = x.map(logistic);
    let out = output.clone();
    Ok(GradPair::new(output, move |g| {
        Ok(Grads {
            input: out.zip_map(g, |s, gv| gv * s * (1.0 - s))?,
            params: Vec::new(),
        })
    }))
}
