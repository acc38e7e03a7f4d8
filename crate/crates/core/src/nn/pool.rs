use alloc::vec;
use alloc::vec::Vec;

use super::grad::{GradPair, Grads};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Spatial mean per (sample, channel), shaped `(N, C, 1, 1)`.
///
/// Sums are shifted by the plane's first element, so a spatially constant
/// plane averages to exactly that constant.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let data = x
        .data()
        .chunks_exact(s.plane())
        .map(|p| {
            let p0 = p[0];
            p0 + p.iter().map(|v| v - p0).sum::<f64>() * inv
        })
        .collect();
    Tensor::from_vec(Shape { h: 1, w: 1, ..s }, data).expect("pooled shape matches data")
}

/// [`global_avg_pool`] with its backward map (no parameters).
pub fn global_avg_pool_op(x: &Tensor) -> Result<GradPair> {
    let in_shape = x.shape();
    let output = global_avg_pool(x);
    Ok(GradPair::new(output, move |g| {
        let plane = in_shape.plane();
        let inv = 1.0 / plane as f64;
        let mut gx = Vec::with_capacity(in_shape.numel());
        for &gv in g.data() {
            gx.extend(core::iter::repeat_n(gv * inv, plane));
        }
        Ok(Grads {
            input: Tensor::from_vec(in_shape, gx)?,
            params: Vec::new(),
        })
    }))
}

/// Windowed max with implicit `-inf` padding. Gradients route to the first
/// maximal element of each window.
pub fn max_pool(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<GradPair> {
    let s = x.shape();
    if kernel == 0 || stride == 0 || padding >= kernel {
        return Err(Error::InvalidConfig(alloc::format!(
            "max_pool needs kernel > padding and positive stride (k={kernel}, s={stride}, p={padding})"
        )));
    }
    if s.h + 2 * padding < kernel || s.w + 2 * padding < kernel {
        return Err(Error::InputTooSmall {
            min: kernel,
            found: s.h.min(s.w) + 2 * padding,
        });
    }
    let oh = (s.h + 2 * padding - kernel) / stride + 1;
    let ow = (s.w + 2 * padding - kernel) / stride + 1;
    let out_shape = Shape::new(s.n, s.c, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let xd = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..kernel {
                    let h = (i * stride + ki) as isize - padding as isize;
                    if h < 0 || h >= s.h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let w = (j * stride + kj) as isize - padding as isize;
                        if w < 0 || w >= s.w as isize {
                            continue;
                        }
                        let idx = base + h as usize * s.w + w as usize;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let output = Tensor::from_vec(out_shape, out)?;
    Ok(GradPair::new(output, move |g| {
        let mut gx = vec![0.0; s.numel()];
        for (&idx, &gv) in argmax.iter().zip(g.data()) {
            gx[idx] += gv;
        }
        Ok(Grads {
            input: Tensor::from_vec(s, gx)?,
            params: Vec::new(),
        })
    }))
}
