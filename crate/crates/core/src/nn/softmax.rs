use alloc::vec;
use alloc::vec::Vec;

use super::grad::{GradPair, Grads};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Softmax across scales.
///
/// `z` holds `S` concatenated logit groups, shaped `(N, S * C', 1, 1)`: channel
/// `i * C' + c` is scale `i` at within-group position `c`. For each sample and
/// each `c` the `S` outputs are positive and sum to one. Max subtraction keeps
/// the exponentials finite.
pub fn softmax_over_scales(z: &Tensor, scales: usize) -> Result<GradPair> {
    let s = z.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::ShapeMismatch {
            op: "softmax_over_scales",
            expected: Shape { h: 1, w: 1, ..s },
            found: s,
        });
    }
    if scales == 0 || !s.c.is_multiple_of(scales) {
        return Err(Error::NotDivisible {
            what: "softmax logits",
            value: s.c,
            divisor: scales,
        });
    }
    let width = s.c / scales;
    let zd = z.data();
    let mut out = vec![0.0; zd.len()];
    for n in 0..s.n {
        let base = n * s.c;
        for c in 0..width {
            let idx = |i: usize| base + i * width + c;
            let m = (0..scales).map(|i| zd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for i in 0..scales {
                let e = libm::exp(zd[idx(i)] - m);
                out[idx(i)] = e;
                denom += e;
            }
            for i in 0..scales {
                out[idx(i)] /= denom;
            }
        }
    }
    let output = Tensor::from_vec(s, out)?;
    let att = output.clone();
    Ok(GradPair::new(output, move |g| {
        let (a, gd) = (att.data(), g.data());
        let mut gz = vec![0.0; a.len()];
        for n in 0..s.n {
            let base = n * s.c;
            for c in 0..width {
                let idx = |i: usize| base + i * width + c;
                let dot: f64 = (0..scales).map(|i| a[idx(i)] * gd[idx(i)]).sum();
                for i in 0..scales {
                    gz[idx(i)] = a[idx(i)] * (gd[idx(i)] - dot);
                }
            }
        }
        Ok(Grads {
            input: Tensor::from_vec(s, gz)?,
            params: Vec::new(),
        })
    }))
}
