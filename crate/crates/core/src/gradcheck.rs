//! Finite-difference verification of every backward pass.
//!
//! Each case reduces an operator's output to a scalar with a fixed random
//! projection `L = <f(x, θ), R>` and compares the analytic gradients with
//! respect to `x` and every parameter tensor against central differences.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockKind, BlockSpec, Bottleneck};
use crate::nn::{
    conv2d, finite_difference_gradient, global_avg_pool_op, linear, max_pool, relu, sigmoid, softmax_over_scales,
    BatchNormParams, Conv2dParams, GradPair, LinearParams, REL_ERR_FLOOR,
};
use crate::psa::{psa_forward, se_weight_op, BranchInput, PsaConfig, PsaParams, SeWeightParams};
use crate::rng::{self, Rng};
use crate::tensor::{Shape, Tensor};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Relative-error denominators never drop below this fraction of the largest
/// gradient entry of the case: central differences at [`EPSILON`] carry
/// round-off proportional to the loss, not to the tensor being probed.
pub const SCALE_FLOOR: f64 = 1e-5;
/// Factor applied to analytic input gradients when a corrupted backward is requested.
const CORRUPTION: f64 = 1.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Individual tensor operators.
    Ops,
    /// SEWeight and the composed PSA module in its configurations.
    Psa,
    /// Whole bottleneck blocks.
    Block,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Psa, Scope::Block];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Psa => "psa",
            Scope::Block => "block",
        }
    }
}

type Forward = Box<dyn Fn(&Tensor, &[Tensor]) -> Result<GradPair> + Send + Sync>;

/// One operator under test with its input and parameter values.
pub struct Case {
    pub name: String,
    pub input: Tensor,
    pub params: Vec<Tensor>,
    forward: Forward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub operator: String,
    pub input_shape: Shape,
    /// Number of tensors checked (the input plus every parameter).
    pub tensors: usize,
    pub max_rel_error: f64,
    /// Coordinates whose finite-difference stencil straddles a ReLU/max kink.
    pub nonsmooth_skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub results: Vec<CaseResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn from_results(scope: Scope, seed: u64, results: Vec<CaseResult>) -> Self {
        GradcheckReport {
            scope,
            seed,
            epsilon: EPSILON,
            tolerance: TOLERANCE,
            passed: results.iter().all(|r| r.passed),
            results,
        }
    }

    pub fn nonsmooth_skipped(&self) -> usize {
        self.results.iter().map(|r| r.nonsmooth_skipped).sum()
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

impl Case {
    /// Runs the operator on explicit input and parameter values.
    pub fn evaluate(&self, x: &Tensor, params: &[Tensor]) -> Result<GradPair> {
        (self.forward)(x, params)
    }

    /// Runs the comparison. With `corrupt`, the analytic input gradient is
    /// deliberately scaled so the check must fail.
    pub fn check(&self, corrupt: bool) -> Result<CaseResult> {
        let out = (self.forward)(&self.input, &self.params)?;
        let proj = Tensor::random_uniform(out.output.shape(), 0x5eed, -1.0, 1.0)?;
        let grads = out.backward(&proj)?;
        if grads.params.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "{}: backward returned {} parameter gradients for {} parameters",
                self.name,
                grads.params.len(),
                self.params.len()
            )));
        }
        let loss = |x: &Tensor, ps: &[Tensor]| -> f64 {
            (self.forward)(x, ps)
                .and_then(|o| o.output.dot(&proj))
                .unwrap_or(f64::NAN)
        };
        let mut analytic_x = grads.input;
        if corrupt {
            analytic_x = analytic_x.scale(CORRUPTION);
        }
        let scale = grads
            .params
            .iter()
            .map(Tensor::max_abs)
            .fold(analytic_x.max_abs(), f64::max);
        let floor = REL_ERR_FLOOR.max(SCALE_FLOOR * scale);
        let (mut worst, mut skipped) = compare(&analytic_x, &self.input, floor, |t| loss(t, &self.params));
        for (j, analytic) in grads.params.iter().enumerate() {
            let (err, skip) = compare(analytic, &self.params[j], floor, |t| {
                let mut ps = self.params.clone();
                ps[j] = t.clone();
                loss(&self.input, &ps)
            });
            worst = worst.max(err);
            skipped += skip;
        }
        if worst.is_nan() {
            worst = f64::INFINITY;
        }
        Ok(CaseResult {
            operator: self.name.clone(),
            input_shape: self.input.shape(),
            tensors: 1 + self.params.len(),
            max_rel_error: worst,
            nonsmooth_skipped: skipped,
            passed: worst < TOLERANCE,
        })
    }
}

/// Element-wise comparison against central differences at [`EPSILON`],
/// scored as `|a - n| / max(|a|, |n|, floor)`.
///
/// A coordinate over tolerance is re-probed at `EPSILON / 2`: a smooth
/// function gives the same difference quotient to within `O(eps^2)`, while a
/// stencil crossing a kink does not. Such coordinates are counted, not scored.
fn compare(analytic: &Tensor, x: &Tensor, floor: f64, f: impl Fn(&Tensor) -> f64) -> (f64, usize) {
    let numeric = finite_difference_gradient(&f, x, EPSILON);
    let rel = |a: f64, b: f64| libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(floor);
    let mut probe = x.clone();
    let (mut worst, mut skipped) = (0.0f64, 0);
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = rel(a, n);
        if err < TOLERANCE {
            worst = worst.max(err);
            continue;
        }
        let orig = x.data()[i];
        let h = EPSILON / 2.0;
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let half = (plus - minus) / (2.0 * h);
        if rel(n, half) >= TOLERANCE {
            skipped += 1;
        } else {
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    (worst, skipped)
}

fn randomize(params: Vec<&mut Tensor>, rng: &mut Rng) -> Result<()> {
    for p in params {
        *p = Tensor::random_uniform_with(p.shape(), rng, -1.0, 1.0)?;
    }
    Ok(())
}

/// Wraps a parameterized operator so that its parameter tensors can be swapped.
fn parameterized<P, G, F>(mut proto: P, get: G, op: F, rng: &mut Rng) -> Result<(Vec<Tensor>, Forward)>
where
    P: Clone + Send + Sync + 'static,
    G: Fn(&mut P) -> Vec<&mut Tensor> + Send + Sync + 'static,
    F: Fn(&Tensor, &P) -> Result<GradPair> + Send + Sync + 'static,
{
    randomize(get(&mut proto), rng)?;
    let params = get(&mut proto).into_iter().map(|t| t.clone()).collect();
    let forward: Forward = Box::new(move |x, ps| {
        let mut p = proto.clone();
        for (dst, src) in get(&mut p).into_iter().zip(ps) {
            *dst = src.clone();
        }
        op(x, &p)
    });
    Ok((params, forward))
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Result<Shape> {
    Shape::new(n, c, h, w)
}

struct Builder {
    rng: Rng,
    cases: Vec<Case>,
}

impl Builder {
    fn input(&mut self, s: Shape) -> Result<Tensor> {
        Tensor::random_uniform_with(s, &mut self.rng, -1.0, 1.0)
    }

    fn stateless(
        &mut self,
        name: &str,
        s: Shape,
        op: impl Fn(&Tensor) -> Result<GradPair> + Send + Sync + 'static,
    ) -> Result<()> {
        let input = self.input(s)?;
        self.cases.push(Case {
            name: name.into(),
            input,
            params: Vec::new(),
            forward: Box::new(move |x, _| op(x)),
        });
        Ok(())
    }

    fn with_params<P, G, F>(&mut self, name: &str, s: Shape, proto: P, get: G, op: F) -> Result<()>
    where
        P: Clone + Send + Sync + 'static,
        G: Fn(&mut P) -> Vec<&mut Tensor> + Send + Sync + 'static,
        F: Fn(&Tensor, &P) -> Result<GradPair> + Send + Sync + 'static,
    {
        let input = self.input(s)?;
        let (params, forward) = parameterized(proto, get, op, &mut self.rng)?;
        self.cases.push(Case {
            name: name.into(),
            input,
            params,
            forward,
        });
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        s: Shape,
        out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Result<()> {
        let mut p = Conv2dParams::new(s.c, out, k, stride, pad, groups, &mut self.rng)?;
        if bias {
            p.bias = Some(Tensor::zeros(shape(1, out, 1, 1)?));
        }
        self.with_params(name, s, p, Conv2dParams::params_mut, conv2d)
    }

    fn ops(&mut self) -> Result<()> {
        self.conv("conv2d 3x3", shape(2, 4, 6, 6)?, 6, 3, 1, 1, 1, false)?;
        self.conv("conv2d 5x5 stride 2 bias", shape(2, 3, 7, 7)?, 4, 5, 2, 2, 1, true)?;
        self.conv("conv2d grouped g=4", shape(2, 8, 5, 5)?, 8, 3, 1, 1, 4, false)?;
        self.conv("conv2d 1x1", shape(2, 6, 4, 4)?, 5, 1, 1, 0, 1, false)?;
        let lin = LinearParams::new(12, 5, true, &mut self.rng)?;
        self.with_params("linear", shape(2, 12, 1, 1)?, lin, LinearParams::params_mut, linear)?;
        let bn = BatchNormParams::new(4)?;
        self.with_params(
            "batch_norm train",
            shape(2, 4, 3, 3)?,
            bn,
            BatchNormParams::params_mut,
            |x, p| p.forward(x, true).map(|r| r.0),
        )?;
        let mut bn = BatchNormParams::new(4)?;
        bn.running_mean = vec![0.3, -0.2, 0.1, 0.0];
        bn.running_var = vec![0.5, 1.5, 2.0, 0.8];
        self.with_params(
            "batch_norm eval",
            shape(2, 4, 3, 3)?,
            bn,
            BatchNormParams::params_mut,
            |x, p| p.forward(x, false).map(|r| r.0),
        )?;
        self.stateless("relu", shape(2, 3, 4, 4)?, relu)?;
        self.stateless("sigmoid", shape(2, 3, 4, 4)?, sigmoid)?;
        self.stateless("max_pool 3/2/1", shape(2, 3, 7, 7)?, |x| max_pool(x, 3, 2, 1))?;
        self.stateless("max_pool 2/2/0", shape(2, 3, 6, 6)?, |x| max_pool(x, 2, 2, 0))?;
        self.stateless("global_avg_pool", shape(2, 5, 4, 4)?, global_avg_pool_op)?;
        self.stateless("softmax_over_scales", shape(2, 16, 1, 1)?, |z| {
            softmax_over_scales(z, 4)
        })
    }

    fn psa_case(&mut self, name: &str, s: Shape, cfg: PsaConfig) -> Result<()> {
        let p = PsaParams::new(cfg, &mut self.rng)?;
        self.with_params(name, s, p, PsaParams::params_mut, psa_forward)
    }

    fn psa(&mut self) -> Result<()> {
        let se = SeWeightParams::new(16, 4, true, &mut self.rng)?;
        self.with_params(
            "se_weight",
            shape(2, 16, 4, 4)?,
            se,
            SeWeightParams::params_mut,
            se_weight_op,
        )?;
        let groups = [1, 2, 4, 4];
        let base = PsaConfig::new(16).with_groups(&groups);
        self.psa_case("psa full-input", shape(2, 16, 6, 6)?, base.clone())?;
        self.psa_case(
            "psa split-input",
            shape(2, 16, 6, 6)?,
            base.clone()
                .with_branch_input(BranchInput::Split)
                .with_groups(&[1, 1, 2, 4]),
        )?;
        self.psa_case(
            "psa per-branch se",
            shape(2, 16, 6, 6)?,
            base.clone().with_shared_se(false),
        )?;
        self.psa_case("psa stride 2", shape(2, 16, 8, 8)?, base.with_stride(2))
    }

    fn block_case(&mut self, name: &str, s: Shape, spec: BlockSpec) -> Result<()> {
        let mut b = Bottleneck::new(spec, &mut self.rng)?;
        for bn in [&mut b.bn1, &mut b.bn2, &mut b.bn3] {
            bn.running_var.iter_mut().for_each(|v| *v = 1.0);
        }
        self.with_params(name, s, b, Bottleneck::params_mut, |x, b| {
            b.forward(x, true).map(|r| r.0)
        })
    }

    fn blocks(&mut self) -> Result<()> {
        let psa = |stride| PsaConfig::new(8).with_groups(&[1, 1, 2, 2]).with_stride(stride);
        let spec = |kind, cin, stride, psa: Option<PsaConfig>| BlockSpec {
            kind,
            in_channels: cin,
            mid_channels: 8,
            out_channels: 16,
            stride,
            psa,
            se_reduction: (kind == BlockKind::Se).then_some(4),
        };
        self.block_case(
            "epsa block identity",
            shape(2, 16, 4, 4)?,
            spec(BlockKind::Epsa, 16, 1, Some(psa(1))),
        )?;
        self.block_case(
            "epsa block projection",
            shape(2, 8, 6, 6)?,
            spec(BlockKind::Epsa, 8, 2, Some(psa(2))),
        )?;
        self.block_case(
            "resnet block projection",
            shape(2, 8, 6, 6)?,
            spec(BlockKind::Resnet, 8, 2, None),
        )?;
        self.block_case("se block", shape(2, 16, 4, 4)?, spec(BlockKind::Se, 16, 1, None))
    }
}

/// All cases of a scope. Inputs and parameters are drawn from `seed`.
pub fn cases(scope: Scope, seed: u64) -> Result<Vec<Case>> {
    let mut b = Builder {
        rng: rng::seeded(seed),
        cases: Vec::new(),
    };
    match scope {
        Scope::Ops => b.ops()?,
        Scope::Psa => b.psa()?,
        Scope::Block => b.blocks()?,
    }
    Ok(b.cases)
}

/// Sequential run of a whole scope.
pub fn run_gradcheck(scope: Scope, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let results = cases(scope, seed)?
        .iter()
        .map(|c| c.check(corrupt))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport::from_results(scope, seed, results))
}
