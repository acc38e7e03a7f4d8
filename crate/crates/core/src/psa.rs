//! Pyramid squeeze attention.
//!
//! The module runs `S` convolution branches with growing kernels and group
//! counts (the squeeze-and-concat stage), scores each branch's channels with an
//! SEWeight unit, normalizes the scores across the `S` branches with a softmax,
//! reweights every branch by its attention and concatenates the results.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d, global_avg_pool_op, linear, relu, sigmoid, softmax_over_scales, Conv2dParams, GradPair, Grads, LinearParams,
};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Group count paired with an odd kernel size: `2^((k - 1) / 2)`, except
/// that a 3x3 kernel uses a single group.
pub fn kernel_to_group(kernel: usize) -> Result<usize> {
    if kernel < 3 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "kernel_to_group needs an odd kernel >= 3, got {kernel}"
        )));
    }
    if kernel == 3 {
        return Ok(1);
    }
    let exp = (kernel - 1) / 2;
    if exp >= usize::BITS as usize {
        return Err(Error::InvalidConfig(format!(
            "kernel {kernel} overflows the group count"
        )));
    }
    Ok(1 << exp)
}

/// What each branch convolves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchInput {
    /// Every branch reads all `C` input channels and emits `C / S`.
    #[default]
    Full,
    /// The input is split into `S` groups of `C / S` channels; branch `i`
    /// reads only group `i`.
    Split,
}

/// Hyperparameters of one PSA module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsaConfig {
    pub channels: usize,
    pub scales: usize,
    pub kernels: Vec<usize>,
    pub groups: Vec<usize>,
    pub se_reduction: usize,
    pub stride: usize,
    pub branch_input: BranchInput,
    /// One SEWeight unit applied to every branch, instead of one per branch.
    pub shared_se: bool,
}

impl PsaConfig {
    pub const DEFAULT_KERNELS: [usize; 4] = [3, 5, 7, 9];
    pub const DEFAULT_GROUPS: [usize; 4] = [1, 4, 8, 16];

    /// Four scales, kernels (3, 5, 7, 9), groups (1, 4, 8, 16), SE reduction 16,
    /// stride 1, full-input branches and a shared SEWeight unit.
    pub fn new(channels: usize) -> Self {
        PsaConfig {
            channels,
            scales: 4,
            kernels: Self::DEFAULT_KERNELS.to_vec(),
            groups: Self::DEFAULT_GROUPS.to_vec(),
            se_reduction: 16,
            stride: 1,
            branch_input: BranchInput::Full,
            shared_se: true,
        }
    }

    /// `S` scales with `k_i = 2(i + 1) + 1` and `G_i = kernel_to_group(k_i)`.
    pub fn with_default_rule(channels: usize, scales: usize) -> Result<Self> {
        let kernels: Vec<usize> = (0..scales).map(|i| 2 * (i + 1) + 1).collect();
        let groups = kernels.iter().map(|&k| kernel_to_group(k)).collect::<Result<_>>()?;
        let cfg = PsaConfig {
            scales,
            kernels,
            groups,
            ..PsaConfig::new(channels)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_groups(mut self, groups: &[usize]) -> Self {
        self.groups = groups.to_vec();
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_branch_input(mut self, mode: BranchInput) -> Self {
        self.branch_input = mode;
        self
    }

    pub fn with_shared_se(mut self, shared: bool) -> Self {
        self.shared_se = shared;
        self
    }

    /// `C' = C / S`.
    pub fn branch_channels(&self) -> usize {
        self.channels / self.scales
    }

    pub fn branch_in_channels(&self) -> usize {
        match self.branch_input {
            BranchInput::Full => self.channels,
            BranchInput::Split => self.branch_channels(),
        }
    }

    /// SEWeight hidden width, `max(C' / r, 1)`.
    pub fn se_hidden(&self) -> usize {
        (self.branch_channels() / self.se_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("PSA needs positive channels and scales".into()));
        }
        if self.kernels.len() != self.scales || self.groups.len() != self.scales {
            return Err(Error::InvalidConfig(format!(
                "PSA with {} scales needs {0} kernels and {0} groups, got {} and {}",
                self.scales,
                self.kernels.len(),
                self.groups.len()
            )));
        }
        if !self.channels.is_multiple_of(self.scales) {
            return Err(Error::NotDivisible {
                what: "PSA channels",
                value: self.channels,
                divisor: self.scales,
            });
        }
        if self.se_reduction == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("se_reduction and stride must be positive".into()));
        }
        let out = self.branch_channels();
        let inp = self.branch_in_channels();
        for (&k, &g) in self.kernels.iter().zip(&self.groups) {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("PSA kernels must be odd, got {k}")));
            }
            if g == 0 || !out.is_multiple_of(g) {
                return Err(Error::NotDivisible {
                    what: "PSA branch channels",
                    value: out,
                    divisor: g,
                });
            }
            if !inp.is_multiple_of(g) {
                return Err(Error::NotDivisible {
                    what: "PSA branch input channels",
                    value: inp,
                    divisor: g,
                });
            }
        }
        Ok(())
    }

    pub fn has_default_kernels_and_groups(&self) -> bool {
        self.kernels == Self::DEFAULT_KERNELS && self.groups == Self::DEFAULT_GROUPS
    }
}

/// The two fully-connected layers of an SEWeight unit: `C' -> hidden -> C'`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeWeightParams {
    pub fc0: LinearParams,
    pub fc1: LinearParams,
}

impl SeWeightParams {
    pub fn new(channels: usize, reduction: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(SeWeightParams {
            fc0: LinearParams::new(channels, hidden, bias, rng)?,
            fc1: LinearParams::new(hidden, channels, bias, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc0.in_features()
    }

    pub fn param_count(&self) -> usize {
        self.fc0.param_count() + self.fc1.param_count()
    }

    /// `[fc0.weight, fc0.bias?, fc1.weight, fc1.bias?]`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.fc0.params();
        v.extend(self.fc1.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.fc0.params_mut();
        v.extend(self.fc1.params_mut());
        v
    }
}

/// Channel weights `sigmoid(fc1(relu(fc0(gap(x)))))`, shaped `(N, C', 1, 1)`.
pub fn se_weight(x: &Tensor, p: &SeWeightParams) -> Result<Tensor> {
    Ok(se_weight_op(x, p)?.output)
}

/// [`se_weight`] with its backward map. Parameter gradients follow
/// [`SeWeightParams::params`].
pub fn se_weight_op(x: &Tensor, p: &SeWeightParams) -> Result<GradPair> {
    if x.shape().c != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "se_weight",
            expected: x.shape().with_channels(p.channels()),
            found: x.shape(),
        });
    }
    let pool = global_avg_pool_op(x)?;
    let fc0 = linear(&pool.output, &p.fc0)?;
    let act = relu(&fc0.output)?;
    let fc1 = linear(&act.output, &p.fc1)?;
    let gate = sigmoid(&fc1.output)?;
    let output = gate.output.clone();
    Ok(GradPair::new(output, move |g| {
        let g = gate.backward(g)?.input;
        let Grads { input: g, params: p1 } = fc1.backward(&g)?;
        let g = act.backward(&g)?.input;
        let Grads {
            input: g,
            params: mut p0,
        } = fc0.backward(&g)?;
        let input = pool.backward(&g)?.input;
        p0.extend(p1);
        Ok(Grads { input, params: p0 })
    }))
}

/// Learnable state of one PSA module.
#[derive(Clone, Debug, PartialEq)]
pub struct PsaParams {
    pub config: PsaConfig,
    /// Branch `i`: kernel `k_i`, groups `G_i`, padding `(k_i - 1) / 2`, bias-free.
    pub branch_convs: Vec<Conv2dParams>,
    /// One entry when `config.shared_se`, otherwise one per branch.
    pub se_weights: Vec<SeWeightParams>,
}

impl PsaParams {
    pub fn new(config: PsaConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (cin, cout) = (config.branch_in_channels(), config.branch_channels());
        let branch_convs = config
            .kernels
            .iter()
            .zip(&config.groups)
            .map(|(&k, &g)| Conv2dParams::new(cin, cout, k, config.stride, (k - 1) / 2, g, rng))
            .collect::<Result<Vec<_>>>()?;
        let n_se = if config.shared_se { 1 } else { config.scales };
        let se_weights = (0..n_se)
            .map(|_| SeWeightParams::new(cout, config.se_reduction, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(PsaParams {
            config,
            branch_convs,
            se_weights,
        })
    }

    pub fn se_for(&self, branch: usize) -> &SeWeightParams {
        if self.config.shared_se {
            &self.se_weights[0]
        } else {
            &self.se_weights[branch]
        }
    }

    pub fn param_count(&self) -> usize {
        self.branch_convs.iter().map(Conv2dParams::param_count).sum::<usize>()
            + self.se_weights.iter().map(SeWeightParams::param_count).sum::<usize>()
    }

    /// Branch conv weights in branch order, then the SEWeight parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.branch_convs.iter().flat_map(Conv2dParams::params).collect();
        v.extend(self.se_weights.iter().flat_map(SeWeightParams::params));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .branch_convs
            .iter_mut()
            .flat_map(Conv2dParams::params_mut)
            .collect();
        v.extend(self.se_weights.iter_mut().flat_map(SeWeightParams::params_mut));
        v
    }

    /// `(name suffix, tensor)` pairs in [`PsaParams::params`] order.
    pub fn named_params(&self) -> Vec<(alloc::string::String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.branch_convs.iter().enumerate() {
            v.push((format!("branch{i}.weight"), &c.weight));
            if let Some(b) = &c.bias {
                v.push((format!("branch{i}.bias"), b));
            }
        }
        for (i, se) in self.se_weights.iter().enumerate() {
            let prefix = if self.config.shared_se {
                alloc::string::String::from("se")
            } else {
                format!("se{i}")
            };
            for (fc, lin) in [("fc0", &se.fc0), ("fc1", &se.fc1)] {
                v.push((format!("{prefix}.{fc}.weight"), &lin.weight));
                if let Some(b) = &lin.bias {
                    v.push((format!("{prefix}.{fc}.bias"), b));
                }
            }
        }
        v
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().c != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "psa",
                expected: x.shape().with_channels(self.config.channels),
                found: x.shape(),
            });
        }
        Ok(())
    }

    fn branch_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self.config.branch_input {
            BranchInput::Full => Ok(vec![x.clone(); self.config.scales]),
            BranchInput::Split => x.split_channels(self.config.scales),
        }
    }
}

/// Squeeze-and-concat stage: the `S` branch feature maps `F_i`, each with `C'`
/// channels and identical spatial size.
pub fn spc_forward(x: &Tensor, p: &PsaParams) -> Result<Vec<Tensor>> {
    p.check_input(x)?;
    p.branch_inputs(x)?
        .iter()
        .zip(&p.branch_convs)
        .map(|(xi, conv)| Ok(conv2d(xi, conv)?.output))
        .collect()
}

/// Every intermediate of one PSA forward pass.
#[derive(Clone, Debug)]
pub struct PsaTrace {
    /// `F_i`, one per scale.
    pub branches: Vec<Tensor>,
    /// `Z = Z_0 ⊕ ... ⊕ Z_{S-1}`, shaped `(N, S * C', 1, 1)`.
    pub logits: Tensor,
    /// Softmax of `logits` across scales, same layout.
    pub attention: Tensor,
    pub output: Tensor,
}

pub fn psa_trace(x: &Tensor, p: &PsaParams) -> Result<PsaTrace> {
    let (pair, trace) = psa_impl(x, p)?;
    drop(pair);
    Ok(trace)
}

/// Full PSA forward pass. Output channels equal input channels; spatial size
/// shrinks only by `config.stride`.
///
/// Parameter gradients follow [`PsaParams::params`]. With a shared SEWeight
/// unit its gradient is the sum over branches.
pub fn psa_forward(x: &Tensor, p: &PsaParams) -> Result<GradPair> {
    Ok(psa_impl(x, p)?.0)
}

fn psa_impl(x: &Tensor, p: &PsaParams) -> Result<(GradPair, PsaTrace)> {
    p.check_input(x)?;
    let cfg = p.config.clone();
    let s = cfg.scales;
    let inputs = p.branch_inputs(x)?;
    let convs = inputs
        .iter()
        .zip(&p.branch_convs)
        .map(|(xi, conv)| conv2d(xi, conv))
        .collect::<Result<Vec<_>>>()?;
    let ses = convs
        .iter()
        .enumerate()
        .map(|(i, f)| se_weight_op(&f.output, p.se_for(i)))
        .collect::<Result<Vec<_>>>()?;
    let logits = Tensor::concat_channels(&ses.iter().map(|z| z.output.clone()).collect::<Vec<_>>())?;
    let soft = softmax_over_scales(&logits, s)?;
    let att = soft.output.split_channels(s)?;
    let ys = convs
        .iter()
        .zip(&att)
        .map(|(f, a)| f.output.broadcast_mul_channel(a))
        .collect::<Result<Vec<_>>>()?;
    let output = Tensor::concat_channels(&ys)?;
    let trace = PsaTrace {
        branches: convs.iter().map(|c| c.output.clone()).collect(),
        logits,
        attention: soft.output.clone(),
        output: output.clone(),
    };
    let in_shape = x.shape();
    let se_param_lens: Vec<usize> = p.se_weights.iter().map(|se| se.params().len()).collect();

    let pair = GradPair::new(output, move |g| {
        let gy = g.split_channels(s)?;
        // Y_i = F_i * att_i: split the gradient between the feature map and the weights.
        let mut grad_f = Vec::with_capacity(s);
        let mut grad_att = Vec::with_capacity(s);
        for ((gi, f), a) in gy.iter().zip(&convs).zip(&att) {
            grad_f.push(gi.broadcast_mul_channel(a)?);
            grad_att.push(gi.mul(&f.output)?.spatial_sum());
        }
        let grad_z = soft.backward(&Tensor::concat_channels(&grad_att)?)?.input;
        let grad_z = grad_z.split_channels(s)?;

        let mut se_grads: Vec<Vec<Tensor>> = Vec::with_capacity(se_param_lens.len());
        let mut conv_grads = Vec::with_capacity(s);
        let mut input_grads = Vec::with_capacity(s);
        for i in 0..s {
            let Grads { input: gf_se, params } = ses[i].backward(&grad_z[i])?;
            let se_slot = if cfg.shared_se { 0 } else { i };
            if se_slot < se_grads.len() {
                for (acc, gp) in se_grads[se_slot].iter_mut().zip(&params) {
                    acc.add_assign(gp)?;
                }
            } else {
                se_grads.push(params);
            }
            let gf = grad_f[i].add(&gf_se)?;
            let Grads { input, params } = convs[i].backward(&gf)?;
            conv_grads.extend(params);
            input_grads.push(input);
        }
        let input = match cfg.branch_input {
            BranchInput::Full => {
                let mut acc = Tensor::zeros(in_shape);
                for gi in &input_grads {
                    acc.add_assign(gi)?;
                }
                acc
            }
            BranchInput::Split => Tensor::concat_channels(&input_grads)?,
        };
        let mut params = conv_grads;
        params.extend(se_grads.into_iter().flatten());
        Ok(Grads { input, params })
    });
    Ok((pair, trace))
}

/// Output shape of a PSA module for a given input shape.
pub fn psa_output_shape(cfg: &PsaConfig, input: Shape) -> Result<Shape> {
    let (oh, ow) = ((input.h - 1) / cfg.stride + 1, (input.w - 1) / cfg.stride + 1);
    Shape::new(input.n, cfg.channels, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_gradient, max_relative_error};
    use crate::rng::seeded;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn kernel_to_group_rule() {
        assert_eq!(kernel_to_group(3).unwrap(), 1);
        assert_eq!(kernel_to_group(5).unwrap(), 4);
        assert_eq!(kernel_to_group(7).unwrap(), 8);
        assert_eq!(kernel_to_group(9).unwrap(), 16);
        assert_eq!(kernel_to_group(11).unwrap(), 32);
        assert!(kernel_to_group(4).is_err());
        assert!(kernel_to_group(1).is_err());
    }

    #[test]
    fn default_rule_reproduces_default_config() {
        let cfg = PsaConfig::with_default_rule(64, 4).unwrap();
        assert_eq!(cfg.kernels, [3, 5, 7, 9]);
        assert_eq!(cfg.groups, [1, 4, 8, 16]);
        assert_eq!(cfg, PsaConfig::new(64));
    }

    #[test]
    fn config_validation() {
        assert!(PsaConfig::new(64).validate().is_ok());
        assert!(PsaConfig::new(66).validate().is_err());
        // 32 / 4 = 8 output channels cannot be split into 16 groups.
        assert!(PsaConfig::new(32).validate().is_err());
        let mut cfg = PsaConfig::new(64);
        cfg.kernels.pop();
        assert!(cfg.validate().is_err());
        let cfg = PsaConfig::new(128)
            .with_groups(&[32; 4])
            .with_branch_input(BranchInput::Split);
        assert!(cfg.validate().is_ok());
        let cfg = PsaConfig::new(64).with_groups(&[1, 4, 8, 32]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn se_hidden_width_floors_at_one() {
        assert_eq!(PsaConfig::new(64).se_hidden(), 1);
        assert_eq!(PsaConfig::new(512).se_hidden(), 8);
    }

    #[test]
    fn se_weight_of_zero_input_is_half() {
        let mut rng = seeded(1);
        let mut p = SeWeightParams::new(8, 4, true, &mut rng).unwrap();
        for b in [&mut p.fc0.bias, &mut p.fc1.bias] {
            let t = b.as_mut().unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let z = se_weight(&Tensor::zeros(shape(2, 8, 3, 5)), &p).unwrap();
        assert_eq!(z.shape(), shape(2, 8, 1, 1));
        assert!(z.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn se_weight_matches_stepwise_composition() {
        let mut rng = seeded(2);
        let p = SeWeightParams::new(16, 4, true, &mut rng).unwrap();
        let x = Tensor::random_uniform(shape(2, 16, 5, 4), 3, -1.0, 1.0).unwrap();
        let z = se_weight(&x, &p).unwrap();
        for n in 0..2 {
            let g: Vec<f64> = (0..16).map(|c| x.plane(n, c).iter().sum::<f64>() / 20.0).collect();
            let h: Vec<f64> = (0..4)
                .map(|o| {
                    let v: f64 = (0..16).map(|c| p.fc0.weight.get(o, c, 0, 0) * g[c]).sum::<f64>()
                        + p.fc0.bias.as_ref().unwrap().get(0, o, 0, 0);
                    v.max(0.0)
                })
                .collect();
            for c in 0..16 {
                let v: f64 = (0..4).map(|o| p.fc1.weight.get(c, o, 0, 0) * h[o]).sum::<f64>()
                    + p.fc1.bias.as_ref().unwrap().get(0, c, 0, 0);
                let expected = 1.0 / (1.0 + libm::exp(-v));
                assert!((z.get(n, c, 0, 0) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spc_branch_shapes() {
        let mut rng = seeded(4);
        for mode in [BranchInput::Full, BranchInput::Split] {
            let p = PsaParams::new(PsaConfig::new(64).with_branch_input(mode), &mut rng).unwrap();
            let f = spc_forward(&Tensor::zeros(shape(1, 64, 7, 6)), &p).unwrap();
            assert_eq!(f.len(), 4);
            assert!(f.iter().all(|t| t.shape() == shape(1, 16, 7, 6)));
            let expected_in = if mode == BranchInput::Full { 64 } else { 16 };
            assert!(p
                .branch_convs
                .iter()
                .all(|c| c.in_channels == expected_in && c.out_channels == 16));
        }
    }

    #[test]
    fn spc_branches_equal_standalone_convolutions() {
        let mut rng = seeded(5);
        let cfg = PsaConfig::new(16)
            .with_groups(&[1, 2, 4, 4])
            .with_branch_input(BranchInput::Split);
        let p = PsaParams::new(cfg, &mut rng).unwrap();
        let x = Tensor::random_uniform(shape(2, 16, 6, 6), 6, -1.0, 1.0).unwrap();
        let f = spc_forward(&x, &p).unwrap();
        for (i, fi) in f.iter().enumerate() {
            let slice = x.slice_channels(4 * i, 4).unwrap();
            assert_eq!(*fi, conv2d(&slice, &p.branch_convs[i]).unwrap().output);
        }
    }

    #[test]
    fn stride_two_halves_every_branch() {
        let mut rng = seeded(6);
        let p = PsaParams::new(PsaConfig::new(64).with_stride(2), &mut rng).unwrap();
        let x = Tensor::zeros(shape(1, 64, 7, 8));
        let y = psa_forward(&x, &p).unwrap().output;
        assert_eq!(y.shape(), shape(1, 64, 4, 4));
        assert_eq!(psa_output_shape(&p.config, x.shape()).unwrap(), y.shape());
    }

    #[test]
    fn uniform_attention_scales_branches() {
        let mut rng = seeded(7);
        let mut p = PsaParams::new(PsaConfig::new(16).with_groups(&[1, 2, 4, 4]), &mut rng).unwrap();
        for se in &mut p.se_weights {
            se.fc1.weight = Tensor::zeros(se.fc1.weight.shape());
        }
        let x = Tensor::random_uniform(shape(2, 16, 5, 5), 8, -1.0, 1.0).unwrap();
        let trace = psa_trace(&x, &p).unwrap();
        assert!(trace.attention.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let expected = Tensor::concat_channels(&trace.branches).unwrap().scale(0.25);
        assert!(trace.output.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seeded(8);
        let p = PsaParams::new(PsaConfig::new(8).with_groups(&[1, 1, 2, 2]), &mut rng).unwrap();
        let x = Tensor::random_uniform(shape(1, 8, 4, 4), 9, -1.0, 1.0).unwrap();
        let pair = psa_forward(&x, &p).unwrap();
        let g = pair.backward(&Tensor::zeros(pair.output.shape())).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.params.len(), p.params().len());
        assert!(g.params.iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences_both_modes() {
        for (mode, shared) in [(BranchInput::Full, true), (BranchInput::Split, false)] {
            let mut rng = seeded(10);
            let cfg = PsaConfig::new(8)
                .with_groups(&[1, 1, 2, 2])
                .with_branch_input(mode)
                .with_shared_se(shared);
            let p = PsaParams::new(cfg, &mut rng).unwrap();
            let x = Tensor::random_uniform(shape(1, 8, 4, 4), 11, -1.0, 1.0).unwrap();
            let pair = psa_forward(&x, &p).unwrap();
            let proj = Tensor::random_uniform(pair.output.shape(), 12, -1.0, 1.0).unwrap();
            let grads = pair.backward(&proj).unwrap();
            let f = |t: &Tensor| psa_forward(t, &p).unwrap().output.dot(&proj).unwrap();
            let gx = finite_difference_gradient(f, &x, 1e-5);
            assert!(max_relative_error(&grads.input, &gx) < 1e-4, "{mode:?}");
            for (j, analytic) in grads.params.iter().enumerate() {
                let fp = |t: &Tensor| {
                    let mut q = p.clone();
                    *q.params_mut()[j] = t.clone();
                    psa_forward(&x, &q).unwrap().output.dot(&proj).unwrap()
                };
                let num = finite_difference_gradient(fp, p.params()[j], 1e-5);
                assert!(max_relative_error(analytic, &num) < 1e-4, "{mode:?} param {j}");
            }
        }
    }
}
