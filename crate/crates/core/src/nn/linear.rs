use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use super::grad::{GradPair, Grads};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Fully-connected layer. `weight` is `(out_features, in_features, 1, 1)`,
/// `bias` is `(1, out_features, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    /// Uniform init in `±1/sqrt(in_features)` for weight and bias.
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / sqrt(in_features as f64);
        let weight = Tensor::random_uniform_with(Shape::new(out_features, in_features, 1, 1)?, rng, -bound, bound)?;
        let bias = if bias {
            Some(Tensor::random_uniform_with(
                Shape::new(1, out_features, 1, 1)?,
                rng,
                -bound,
                bound,
            )?)
        } else {
            None
        };
        Ok(LinearParams { weight, bias })
    }

    pub fn from_matrix(
        out_features: usize,
        in_features: usize,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let weight = Tensor::from_vec(Shape::new(out_features, in_features, 1, 1)?, weight)?;
        let bias = bias
            .map(|b| Tensor::from_vec(Shape::new(1, out_features, 1, 1)?, b))
            .transpose()?;
        Ok(LinearParams { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

/// `y[n, o] = b[o] + sum_i W[o, i] x[n, i]` on `(N, in, 1, 1)` inputs.
///
/// Backward parameter gradients are `[weight]` or `[weight, bias]`.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<GradPair> {
    let (fi, fo) = (p.in_features(), p.out_features());
    let xs = x.shape();
    let expected = Shape::new(xs.n, fi, 1, 1)?;
    if xs != expected {
        return Err(Error::ShapeMismatch {
            op: "linear",
            expected,
            found: xs,
        });
    }
    let out_shape = Shape::new(xs.n, fo, 1, 1)?;
    let wd = p.weight.data();
    let mut out = Vec::with_capacity(out_shape.numel());
    for row in x.data().chunks_exact(fi) {
        for o in 0..fo {
            let dot: f64 = wd[o * fi..(o + 1) * fi].iter().zip(row).map(|(w, v)| w * v).sum();
            out.push(dot + p.bias.as_ref().map_or(0.0, |b| b.data()[o]));
        }
    }
    let output = Tensor::from_vec(out_shape, out)?;
    let input = x.clone();
    let weight = p.weight.clone();
    let has_bias = p.bias.is_some();
    Ok(GradPair::new(output, move |g| {
        let wd = weight.data();
        let mut gx = vec![0.0; input.len()];
        let mut gw = vec![0.0; wd.len()];
        let mut gb = vec![0.0; fo];
        for ((grow, xrow), gxrow) in g
            .data()
            .chunks_exact(fo)
            .zip(input.data().chunks_exact(fi))
            .zip(gx.chunks_exact_mut(fi))
        {
            for (o, &gv) in grow.iter().enumerate() {
                gb[o] += gv;
                let wrow = &wd[o * fi..(o + 1) * fi];
                let gwrow = &mut gw[o * fi..(o + 1) * fi];
                for i in 0..fi {
                    gxrow[i] += wrow[i] * gv;
                    gwrow[i] += xrow[i] * gv;
                }
            }
        }
        let mut params = vec![Tensor::from_vec(weight.shape(), gw)?];
        if has_bias {
            params.push(Tensor::from_vec(Shape::new(1, fo, 1, 1)?, gb)?);
        }
        Ok(Grads {
            input: Tensor::from_vec(input.shape(), gx)?,
            params,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff::{finite_difference_gradient, max_relative_error};
    use crate::rng::seeded;

    #[test]
    fn identity_weight_returns_input() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let p = LinearParams::from_matrix(3, 3, w, Some(vec![0.0; 3])).unwrap();
        let x = Tensor::random_uniform(Shape::new(2, 3, 1, 1).unwrap(), 1, -1.0, 1.0).unwrap();
        assert_eq!(linear(&x, &p).unwrap().output, x);
    }

    #[test]
    fn hand_arithmetic() {
        let p = LinearParams::from_matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1).unwrap(), vec![1.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &p).unwrap().output.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matches_dot_product_oracle() {
        let mut rng = seeded(2);
        let p = LinearParams::new(5, 3, true, &mut rng).unwrap();
        let x = Tensor::random_uniform(Shape::new(4, 5, 1, 1).unwrap(), 3, -1.0, 1.0).unwrap();
        let y = linear(&x, &p).unwrap().output;
        for n in 0..4 {
            for o in 0..3 {
                let mut acc = p.bias.as_ref().unwrap().get(0, o, 0, 0);
                for i in 0..5 {
                    acc += p.weight.get(o, i, 0, 0) * x.get(n, i, 0, 0);
                }
                assert!((y.get(n, o, 0, 0) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = seeded(3);
        let p = LinearParams::new(4, 2, false, &mut rng).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 1, 1).unwrap());
        assert!(linear(&x, &p).is_err());
        let x = Tensor::zeros(Shape::new(1, 4, 2, 1).unwrap());
        assert!(linear(&x, &p).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(4);
        let p = LinearParams::new(6, 4, true, &mut rng).unwrap();
        let x = Tensor::random_uniform(Shape::new(3, 6, 1, 1).unwrap(), 5, -1.0, 1.0).unwrap();
        let pair = linear(&x, &p).unwrap();
        let proj = Tensor::random_uniform(pair.output.shape(), 6, -1.0, 1.0).unwrap();
        let grads = pair.backward(&proj).unwrap();
        let f = |t: &Tensor| linear(t, &p).unwrap().output.dot(&proj).unwrap();
        assert!(max_relative_error(&grads.input, &finite_difference_gradient(f, &x, 1e-5)) < 1e-7);
        let fw = |w: &Tensor| {
            let mut q = p.clone();
            q.weight = w.clone();
            linear(&x, &q).unwrap().output.dot(&proj).unwrap()
        };
        let gw = finite_difference_gradient(fw, &p.weight, 1e-5);
        assert!(max_relative_error(&grads.params[0], &gw) < 1e-7);
    }
}
