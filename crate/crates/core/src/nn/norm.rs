use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use super::grad::{GradPair, Grads};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-channel batch normalization state. `gamma`/`beta` are trainable and
/// shaped `(1, C, 1, 1)`; the running statistics are not parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Statistics of one training batch, used to update running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (M - 1 denominator) variance, the value blended into `running_var`.
    pub var_unbiased: Vec<f64>,
}

impl BatchNormParams {
    /// gamma = 1, beta = 0, running mean 0 and variance 1, eps 1e-5, momentum 0.1.
    pub fn new(channels: usize) -> Result<Self> {
        let s = Shape::new(1, channels, 1, 1)?;
        Ok(BatchNormParams {
            gamma: Tensor::full(s, 1.0),
            beta: Tensor::zeros(s),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Forward without touching the running statistics. In training mode the
    /// batch statistics are returned so the caller can apply them.
    ///
    /// Backward parameter gradients are `[gamma, beta]`.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(GradPair, Option<BatchStats>)> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                expected: s.with_channels(self.channels()),
                found: s,
            });
        }
        let c = s.c;
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mu = channel_values(x.data(), s, ch).map(|(_, v)| v).sum::<f64>() / count;
                let v2 = channel_values(x.data(), s, ch)
                    .map(|(_, v)| (v - mu) * (v - mu))
                    .sum::<f64>()
                    / count;
                mean[ch] = mu;
                var[ch] = v2;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + self.eps)).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let (gd, bd) = (self.gamma.data(), self.beta.data());
        for ch in 0..c {
            for (i, v) in channel_values(x.data(), s, ch) {
                xhat[i] = (v - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
        let stats = training.then(|| BatchStats {
            var_unbiased: var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect(),
            mean: mean.clone(),
        });
        let output = Tensor::from_vec(s, out)?;
        let gamma = self.gamma.clone();
        let backward = move |g: &Tensor| -> Result<Grads> {
            let gdat = g.data();
            let gam = gamma.data();
            let mut gx = vec![0.0; gdat.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for (i, gv) in channel_values(gdat, s, ch) {
                    sum_g += gv;
                    sum_gx += gv * xhat[i];
                }
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let k = gam[ch] * inv_std[ch];
                if training {
                    for (i, gv) in channel_values(gdat, s, ch) {
                        gx[i] = k * (gv - sum_g / count - xhat[i] * sum_gx / count);
                    }
                } else {
                    for (i, gv) in channel_values(gdat, s, ch) {
                        gx[i] = k * gv;
                    }
                }
            }
            let ps = Shape::new(1, c, 1, 1)?;
            Ok(Grads {
                input: Tensor::from_vec(s, gx)?,
                params: vec![Tensor::from_vec(ps, ggamma)?, Tensor::from_vec(ps, gbeta)?],
            })
        };
        Ok((GradPair::new(output, backward), stats))
    }
}

/// `(flat index, value)` for every element of channel `ch`.
fn channel_values(data: &[f64], s: Shape, ch: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    let plane = s.plane();
    (0..s.n).flat_map(move |n| {
        let base = (n * s.c + ch) * plane;
        (base..base + plane).map(move |i| (i, data[i]))
    })
}

/// Batch normalization. Training mode normalizes with batch statistics and
/// updates the running averages; eval mode uses the running averages.
pub fn batch_norm(x: &Tensor, p: &mut BatchNormParams, training: bool) -> Result<GradPair> {
    let (pair, stats) = p.forward(x, training)?;
    if let Some(stats) = stats {
        p.update_running(&stats);
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff::{finite_difference_gradient, max_relative_error};

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn eval_identity_configuration() {
        let mut p = BatchNormParams::new(3).unwrap();
        let x = Tensor::random_uniform(shape(2, 3, 4, 4), 1, -2.0, 2.0).unwrap();
        let y = batch_norm(&x, &mut p, false).unwrap().output;
        let scale = 1.0 / sqrt(1.0 + 1e-5);
        assert!(y.max_abs_diff(&x.scale(scale)).unwrap() < 1e-14);
        assert!(y.max_abs_diff(&x).unwrap() < 2e-5);
        assert_eq!(p.running_mean, vec![0.0; 3]);
    }

    #[test]
    fn training_output_is_standardized() {
        let mut p = BatchNormParams::new(2).unwrap();
        let x = Tensor::random_uniform(shape(3, 2, 5, 5), 2, 1.0, 4.0).unwrap();
        let y = batch_norm(&x, &mut p, true).unwrap().output;
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        // Running mean moved 10% of the way towards the batch mean (about 2.5).
        assert!(p.running_mean.iter().all(|&m| m > 0.2 && m < 0.3));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut p = BatchNormParams::new(4).unwrap();
        assert!(batch_norm(&Tensor::zeros(shape(1, 3, 2, 2)), &mut p, true).is_err());
    }

    fn random_params(c: usize) -> BatchNormParams {
        let mut p = BatchNormParams::new(c).unwrap();
        p.gamma = Tensor::random_uniform(shape(1, c, 1, 1), 10, 0.5, 1.5).unwrap();
        p.beta = Tensor::random_uniform(shape(1, c, 1, 1), 11, -0.5, 0.5).unwrap();
        p.running_mean = vec![0.3; c];
        p.running_var = vec![1.7; c];
        p
    }

    #[test]
    fn backward_matches_finite_differences() {
        for training in [true, false] {
            let p = random_params(3);
            let x = Tensor::random_uniform(shape(2, 3, 3, 4), 3, -1.0, 1.0).unwrap();
            let (pair, _) = p.forward(&x, training).unwrap();
            let proj = Tensor::random_uniform(x.shape(), 4, -1.0, 1.0).unwrap();
            let grads = pair.backward(&proj).unwrap();
            let f = |t: &Tensor| p.forward(t, training).unwrap().0.output.dot(&proj).unwrap();
            let gx = finite_difference_gradient(f, &x, 1e-5);
            assert!(max_relative_error(&grads.input, &gx) < 1e-5, "training={training}");
            let fg = |gm: &Tensor| {
                let mut q = p.clone();
                q.gamma = gm.clone();
                q.forward(&x, training).unwrap().0.output.dot(&proj).unwrap()
            };
            let gg = finite_difference_gradient(fg, &p.gamma, 1e-5);
            assert!(max_relative_error(&grads.params[0], &gg) < 1e-6);
        }
    }
}
