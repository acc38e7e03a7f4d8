//! Dense 4-D tensors in (N, C, H, W) row-major order.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Batch, channel, height and width extents. All four are strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be positive, got ({n}, {c}, {h}, {w})"
            )));
        }
        Ok(Shape { n, c, h, w })
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub const fn with_channels(self, c: usize) -> Shape {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// An immutable-by-default 4-D array of `f64`.
///
/// Cloning is cheap: the buffer is reference counted and copied on the first
/// write through [`Tensor::data_mut`].
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data.as_slice())
            .finish()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape,
            found: b.shape,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Tensor {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Values drawn uniformly from `[low, high)` with a ChaCha stream seeded by `seed`.
    pub fn random_uniform(shape: Shape, seed: u64, low: f64, high: f64) -> Result<Tensor> {
        let mut rng = rng::seeded(seed);
        Tensor::random_uniform_with(shape, &mut rng, low, high)
    }

    pub fn random_uniform_with(shape: Shape, rng: &mut rng::Rng, low: f64, high: f64) -> Result<Tensor> {
        if !low.is_finite() || !high.is_finite() || low >= high {
            return Err(Error::InvalidRange { low, high });
        }
        let data = (0..shape.numel()).map(|_| rng.gen_range(low..high)).collect();
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Contiguous `h * w` slice for one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                found: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same("zip_map", self, other)?;
        Ok(Tensor {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same("add", self, other)?;
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same("sub", self, other)?;
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same("mul", self, other)?;
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        check_same("add_assign", self, other)?;
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        check_same("dot", self, other)?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        check_same("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks `parts` along the channel axis; part `i` starts at the sum of the
    /// preceding channel counts.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat_channels of an empty list".into()))?
            .shape;
        let mut channels = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    expected: first.with_channels(s.c),
                    found: s,
                });
            }
            channels += s.c;
        }
        let out_shape = first.with_channels(channels);
        let plane = first.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for p in parts {
                let block = p.shape.c * plane;
                data.extend_from_slice(&p.data[n * block..(n + 1) * block]);
            }
        }
        Tensor::from_vec(out_shape, data)
    }

    /// Channels `[start, start + len)` as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.shape.c {
            return Err(Error::InvalidShape(format!(
                "channel slice [{start}, {}) out of range for {}",
                start + len,
                self.shape
            )));
        }
        let plane = self.shape.plane();
        let out_shape = self.shape.with_channels(len);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..self.shape.n {
            let base = (n * self.shape.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::from_vec(out_shape, data)
    }

    /// Samples `[start, start + len)` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.shape.n {
            return Err(Error::InvalidShape(format!(
                "batch slice [{start}, {}) out of range for {}",
                start + len,
                self.shape
            )));
        }
        let per = self.shape.c * self.shape.plane();
        let out_shape = Shape { n: len, ..self.shape };
        Tensor::from_vec(out_shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Splits the channel axis into `s` equal consecutive groups.
    pub fn split_channels(&self, s: usize) -> Result<Vec<Tensor>> {
        if s == 0 || !self.shape.c.is_multiple_of(s) {
            return Err(Error::NotDivisible {
                what: "channels",
                value: self.shape.c,
                divisor: s,
            });
        }
        let width = self.shape.c / s;
        (0..s).map(|i| self.slice_channels(i * width, width)).collect()
    }

    /// `out[n, c, h, w] = self[n, c, h, w] * w[n, c, 0, 0]`.
    pub fn broadcast_mul_channel(&self, w: &Tensor) -> Result<Tensor> {
        let expected = Shape {
            h: 1,
            w: 1,
            ..self.shape
        };
        if w.shape != expected {
            return Err(Error::ShapeMismatch {
                op: "broadcast_mul_channel",
                expected,
                found: w.shape,
            });
        }
        let plane = self.shape.plane();
        let mut data = Vec::with_capacity(self.len());
        for (chunk, &k) in self.data.chunks_exact(plane).zip(w.data.iter()) {
            data.extend(chunk.iter().map(|v| v * k));
        }
        Tensor::from_vec(self.shape, data)
    }

    /// Per-(sample, channel) sums over the spatial axes, shaped (N, C, 1, 1).
    pub fn spatial_sum(&self) -> Tensor {
        let data = self
            .data
            .chunks_exact(self.shape.plane())
            .map(|p| p.iter().sum())
            .collect();
        Tensor {
            shape: Shape {
                h: 1,
                w: 1,
                ..self.shape
            },
            data: Arc::new(data),
        }
    }
}
