//! Bottleneck blocks and whole-network builders.
//!
//! Networks are described declaratively by a [`ModelSpec`] (stem, four stages
//! of bottleneck blocks, pooled linear head) and instantiated into a [`Model`]
//! that owns its parameters and runs forward/backward passes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d, global_avg_pool_op, linear, max_pool, relu, BatchNormParams, BatchStats, Conv2dParams, GradPair, Grads,
    LinearParams,
};
use crate::psa::{psa_forward, se_weight_op, BranchInput, PsaConfig, PsaParams, SeWeightParams};
use crate::rng::{self, Rng};
use crate::tensor::{Shape, Tensor};

/// Smallest accepted input height/width.
pub const MIN_INPUT_SIZE: usize = 32;

pub const MODEL_NAMES: [&str; 8] = [
    "resnet50",
    "resnet101",
    "senet50",
    "senet101",
    "epsanet50_small",
    "epsanet50_large",
    "epsanet101_small",
    "epsanet101_large",
];

const DEPTH_50: [usize; 4] = [3, 4, 6, 3];
const DEPTH_101: [usize; 4] = [3, 4, 23, 3];
const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const LARGE_WIDTHS: [usize; 4] = [128, 256, 512, 1024];
const LARGE_GROUPS: [usize; 4] = [4, 8, 16, 16];

/// Group settings compared in the kernel/group ablation; the last row is the default.
pub const ABLATION_GROUPS: [[usize; 4]; 3] = [[4, 8, 16, 16], [16, 16, 16, 16], [1, 4, 8, 16]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Resnet,
    Se,
    Epsa,
}

/// PSA settings of a stage; channels and stride come from the stage itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsaSpec {
    pub scales: usize,
    pub kernels: Vec<usize>,
    pub groups: Vec<usize>,
    pub se_reduction: usize,
    #[serde(default)]
    pub branch_input: BranchInput,
    #[serde(default = "default_true")]
    pub shared_se: bool,
}

fn default_true() -> bool {
    true
}

fn default_stem() -> usize {
    64
}

fn default_classes() -> usize {
    1000
}

impl PsaSpec {
    pub fn small() -> Self {
        PsaSpec::from_groups(&PsaConfig::DEFAULT_GROUPS, BranchInput::Full)
    }

    pub fn large() -> Self {
        PsaSpec::from_groups(&LARGE_GROUPS, BranchInput::Split)
    }

    pub fn from_groups(groups: &[usize], branch_input: BranchInput) -> Self {
        PsaSpec {
            scales: groups.len(),
            kernels: PsaConfig::DEFAULT_KERNELS[..groups.len().min(4)].to_vec(),
            groups: groups.to_vec(),
            se_reduction: 16,
            branch_input,
            shared_se: true,
        }
    }

    pub fn config(&self, channels: usize, stride: usize) -> PsaConfig {
        PsaConfig {
            channels,
            scales: self.scales,
            kernels: self.kernels.clone(),
            groups: self.groups.clone(),
            se_reduction: self.se_reduction,
            stride,
            branch_input: self.branch_input,
            shared_se: self.shared_se,
        }
    }

    fn label(&self) -> String {
        if self.kernels == PsaConfig::DEFAULT_KERNELS && self.groups == PsaConfig::DEFAULT_GROUPS {
            return "PSA".into();
        }
        let all_same = self.groups.windows(2).all(|w| w[0] == w[1]);
        if all_same {
            format!("PSA(G={})", self.groups[0])
        } else {
            let gs: Vec<String> = self.groups.iter().map(ToString::to_string).collect();
            format!("PSA(G={})", gs.join(","))
        }
    }
}

/// One stage of repeated bottleneck blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub repeats: usize,
    pub mid_channels: usize,
    pub kind: BlockKind,
    /// Defaults to `4 * mid_channels`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    /// Stride of the stage's first block; defaults to 1 for the first stage, 2 after.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psa: Option<PsaSpec>,
    /// SE reduction for `kind = se`; defaults to 16.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_reduction: Option<usize>,
}

impl StageSpec {
    pub fn out_channels(&self) -> usize {
        self.out_channels.unwrap_or(4 * self.mid_channels)
    }
}

/// Declarative network description. Mirrors the JSON model-config schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Width of the 7x7 stride-2 stem convolution.
    #[serde(default = "default_stem")]
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

/// Fully resolved description of one bottleneck block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub psa: Option<PsaConfig>,
    pub se_reduction: Option<usize>,
}

impl BlockSpec {
    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("block widths must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("block stride must be positive".into()));
        }
        match (self.kind, &self.psa) {
            (BlockKind::Epsa, Some(cfg)) => {
                if cfg.channels != self.mid_channels || cfg.stride != self.stride {
                    return Err(Error::InvalidConfig(
                        "PSA channels/stride must match the block's middle stage".into(),
                    ));
                }
                cfg.validate()
            }
            (BlockKind::Epsa, None) => Err(Error::InvalidConfig("epsa block without PSA settings".into())),
            (_, Some(_)) => Err(Error::InvalidConfig("PSA settings on a non-epsa block".into())),
            (BlockKind::Se, None) if self.se_reduction == Some(0) => {
                Err(Error::InvalidConfig("SE reduction must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl ModelSpec {
    fn family(name: &str, kind: BlockKind, depth: [usize; 4], widths: [usize; 4], psa: Option<PsaSpec>) -> Self {
        let stages = depth
            .iter()
            .zip(widths)
            .zip(BASE_WIDTHS)
            .enumerate()
            .map(|(i, ((&repeats, mid), base))| StageSpec {
                repeats,
                mid_channels: mid,
                kind,
                out_channels: Some(4 * base),
                stride: Some(if i == 0 { 1 } else { 2 }),
                psa: psa.clone(),
                se_reduction: (kind == BlockKind::Se).then_some(16),
            })
            .collect();
        ModelSpec {
            name: name.into(),
            num_classes: 1000,
            stem_channels: 64,
            stages,
        }
    }

    /// One of [`MODEL_NAMES`].
    pub fn named(name: &str) -> Result<Self> {
        let spec = match name {
            "resnet50" => Self::family(name, BlockKind::Resnet, DEPTH_50, BASE_WIDTHS, None),
            "resnet101" => Self::family(name, BlockKind::Resnet, DEPTH_101, BASE_WIDTHS, None),
            "senet50" => Self::family(name, BlockKind::Se, DEPTH_50, BASE_WIDTHS, None),
            "senet101" => Self::family(name, BlockKind::Se, DEPTH_101, BASE_WIDTHS, None),
            "epsanet50_small" => Self::family(name, BlockKind::Epsa, DEPTH_50, BASE_WIDTHS, Some(PsaSpec::small())),
            "epsanet101_small" => Self::family(name, BlockKind::Epsa, DEPTH_101, BASE_WIDTHS, Some(PsaSpec::small())),
            "epsanet50_large" => Self::family(name, BlockKind::Epsa, DEPTH_50, LARGE_WIDTHS, Some(PsaSpec::large())),
            "epsanet101_large" => Self::family(name, BlockKind::Epsa, DEPTH_101, LARGE_WIDTHS, Some(PsaSpec::large())),
            other => return Err(Error::UnknownModel(other.into())),
        };
        Ok(spec)
    }

    /// EPSANet-50 at base widths with the given per-branch groups.
    pub fn epsanet50_with_groups(groups: &[usize]) -> Self {
        let gs: Vec<String> = groups.iter().map(ToString::to_string).collect();
        let name = format!("epsanet50_g{}", gs.join("-"));
        Self::family(
            &name,
            BlockKind::Epsa,
            DEPTH_50,
            BASE_WIDTHS,
            Some(PsaSpec::from_groups(groups, BranchInput::Full)),
        )
    }

    /// Two-stage EPSA network for desk-scale training: stem 16, stage widths
    /// 32 and 64 (middle widths 8 and 16), one block per stage.
    pub fn toy(num_classes: usize) -> Self {
        let stage = |mid: usize, stride: usize, groups: &[usize]| StageSpec {
            repeats: 1,
            mid_channels: mid,
            kind: BlockKind::Epsa,
            out_channels: Some(4 * mid),
            stride: Some(stride),
            psa: Some(PsaSpec {
                se_reduction: 4,
                ..PsaSpec::from_groups(groups, BranchInput::Full)
            }),
            se_reduction: None,
        };
        ModelSpec {
            name: "epsanet_toy".into(),
            num_classes,
            stem_channels: 16,
            stages: vec![stage(8, 1, &[1, 2, 2, 2]), stage(16, 2, &[1, 2, 4, 4])],
        }
    }

    pub fn stage_stride(&self, index: usize) -> usize {
        self.stages[index].stride.unwrap_or(if index == 0 { 1 } else { 2 })
    }

    /// Every block with its parameter-name prefix (`layer{stage}.{block}`).
    pub fn block_specs(&self) -> Result<Vec<(String, BlockSpec)>> {
        let mut blocks = Vec::new();
        let mut in_channels = self.stem_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            let out = stage.out_channels();
            for b in 0..stage.repeats {
                let stride = if b == 0 { self.stage_stride(si) } else { 1 };
                let psa = stage.psa.as_ref().map(|p| p.config(stage.mid_channels, stride));
                let se_reduction = match stage.kind {
                    BlockKind::Se => Some(stage.se_reduction.unwrap_or(16)),
                    _ => None,
                };
                let spec = BlockSpec {
                    kind: stage.kind,
                    in_channels,
                    mid_channels: stage.mid_channels,
                    out_channels: out,
                    stride,
                    psa,
                    se_reduction,
                };
                spec.validate()
                    .map_err(|e| Error::InvalidConfig(format!("layer{}.{b}: {e}", si + 1)))?;
                blocks.push((format!("layer{}.{b}", si + 1), spec));
                in_channels = out;
            }
        }
        Ok(blocks)
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, StageSpec::out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one stage".into()));
        }
        if self.num_classes == 0 || self.stem_channels == 0 {
            return Err(Error::InvalidConfig(
                "num_classes and stem_channels must be positive".into(),
            ));
        }
        if self.stages.iter().any(|s| s.repeats == 0) {
            return Err(Error::InvalidConfig("stage repeats must be positive".into()));
        }
        self.block_specs().map(|_| ())
    }
}

/// A trainable tensor with its qualified name.
#[derive(Clone, Copy, Debug)]
pub struct NamedParam<'a> {
    pub name: &'a str,
    pub tensor: &'a Tensor,
    /// Conv and linear weights take weight decay; biases and BN affine terms do not.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MidLayer {
    Conv(Conv2dParams),
    Psa(PsaParams),
}

/// ResNet-style bottleneck: 1x1 reduce, middle stage (3x3 conv or PSA), 1x1
/// expand, optional SE gate on the expanded output, residual add, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub spec: BlockSpec,
    pub conv1: Conv2dParams,
    pub bn1: BatchNormParams,
    pub mid: MidLayer,
    pub bn2: BatchNormParams,
    pub conv3: Conv2dParams,
    pub bn3: BatchNormParams,
    pub se: Option<SeWeightParams>,
    pub downsample: Option<(Conv2dParams, BatchNormParams)>,
}

/// Builds an EPSA block (bottleneck with PSA in the middle slot).
pub fn build_epsa_block(spec: &BlockSpec, rng: &mut Rng) -> Result<Bottleneck> {
    if spec.kind != BlockKind::Epsa {
        return Err(Error::InvalidConfig(format!(
            "expected an epsa block, got {:?}",
            spec.kind
        )));
    }
    Bottleneck::new(spec.clone(), rng)
}

impl Bottleneck {
    pub fn new(spec: BlockSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (cin, mid, out) = (spec.in_channels, spec.mid_channels, spec.out_channels);
        let conv1 = Conv2dParams::new(cin, mid, 1, 1, 0, 1, rng)?;
        let mid_layer = match &spec.psa {
            Some(cfg) => MidLayer::Psa(PsaParams::new(cfg.clone(), rng)?),
            None => MidLayer::Conv(Conv2dParams::new(mid, mid, 3, spec.stride, 1, 1, rng)?),
        };
        let conv3 = Conv2dParams::new(mid, out, 1, 1, 0, 1, rng)?;
        let se = match spec.kind {
            BlockKind::Se => Some(SeWeightParams::new(out, spec.se_reduction.unwrap_or(16), false, rng)?),
            _ => None,
        };
        let downsample = if spec.needs_projection() {
            Some((
                Conv2dParams::new(cin, out, 1, spec.stride, 0, 1, rng)?,
                BatchNormParams::new(out)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1,
            bn1: BatchNormParams::new(mid)?,
            mid: mid_layer,
            bn2: BatchNormParams::new(mid)?,
            conv3,
            bn3: BatchNormParams::new(out)?,
            se,
            downsample,
            spec,
        })
    }

    /// `(suffix, tensor, decay)` in gradient order.
    pub fn named_params(&self) -> Vec<(String, &Tensor, bool)> {
        let mut v: Vec<(String, &Tensor, bool)> = Vec::new();
        v.push(("conv1.weight".into(), &self.conv1.weight, true));
        v.push(("bn1.weight".into(), &self.bn1.gamma, false));
        v.push(("bn1.bias".into(), &self.bn1.beta, false));
        match &self.mid {
            MidLayer::Conv(c) => v.push(("conv2.weight".into(), &c.weight, true)),
            MidLayer::Psa(p) => {
                for (name, t) in p.named_params() {
                    let decay = name.ends_with(".weight");
                    v.push((format!("psa.{name}"), t, decay));
                }
            }
        }
        v.push(("bn2.weight".into(), &self.bn2.gamma, false));
        v.push(("bn2.bias".into(), &self.bn2.beta, false));
        v.push(("conv3.weight".into(), &self.conv3.weight, true));
        v.push(("bn3.weight".into(), &self.bn3.gamma, false));
        v.push(("bn3.bias".into(), &self.bn3.beta, false));
        if let Some(se) = &self.se {
            for (fc, lin) in [("fc0", &se.fc0), ("fc1", &se.fc1)] {
                v.push((format!("se.{fc}.weight"), &lin.weight, true));
                if let Some(b) = &lin.bias {
                    v.push((format!("se.{fc}.bias"), b, false));
                }
            }
        }
        if let Some((c, b)) = &self.downsample {
            v.push(("downsample.0.weight".into(), &c.weight, true));
            v.push(("downsample.1.weight".into(), &b.gamma, false));
            v.push(("downsample.1.bias".into(), &b.beta, false));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        match &mut self.mid {
            MidLayer::Conv(c) => v.extend(c.params_mut()),
            MidLayer::Psa(p) => v.extend(p.params_mut()),
        }
        v.extend(self.bn2.params_mut());
        v.extend(self.conv3.params_mut());
        v.extend(self.bn3.params_mut());
        if let Some(se) = &mut self.se {
            v.extend(se.params_mut());
        }
        if let Some((c, b)) = &mut self.downsample {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t, _)| t.len()).sum()
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams> {
        let mut v = vec![&mut self.bn1, &mut self.bn2, &mut self.bn3];
        if let Some((_, b)) = &mut self.downsample {
            v.push(b);
        }
        v
    }

    /// Applies batch statistics returned by a training-mode [`Bottleneck::forward`].
    pub fn apply_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.batch_norms_mut().into_iter().zip(stats) {
            bn.update_running(s);
        }
    }

    /// Forward pass. In training mode batch-norm layers use batch statistics,
    /// which are returned (bn1, bn2, bn3, projection bn) but not applied.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(GradPair, Vec<BatchStats>)> {
        let mut stats = Vec::new();
        let c1 = conv2d(x, &self.conv1)?;
        let (b1, s) = self.bn1.forward(&c1.output, training)?;
        stats.extend(s);
        let r1 = relu(&b1.output)?;
        let c2 = match &self.mid {
            MidLayer::Conv(p) => conv2d(&r1.output, p)?,
            MidLayer::Psa(p) => psa_forward(&r1.output, p)?,
        };
        let (b2, s) = self.bn2.forward(&c2.output, training)?;
        stats.extend(s);
        let r2 = relu(&b2.output)?;
        let c3 = conv2d(&r2.output, &self.conv3)?;
        let (b3, s) = self.bn3.forward(&c3.output, training)?;
        stats.extend(s);
        let gate = self.se.as_ref().map(|p| se_weight_op(&b3.output, p)).transpose()?;
        let main = match &gate {
            Some(z) => b3.output.broadcast_mul_channel(&z.output)?,
            None => b3.output.clone(),
        };
        let proj = match &self.downsample {
            Some((c, bn)) => {
                let cp = conv2d(x, c)?;
                let (bp, s) = bn.forward(&cp.output, training)?;
                stats.extend(s);
                Some((cp, bp))
            }
            None => None,
        };
        let shortcut = proj.as_ref().map_or_else(|| x.clone(), |(_, b)| b.output.clone());
        let out = relu(&main.add(&shortcut)?)?;
        let output = out.output.clone();
        let pair = GradPair::new(output, move |g| {
            let gs = out.backward(g)?.input;
            let (g_b3, se_params) = match &gate {
                Some(z) => {
                    let gz = gs.mul(&b3.output)?.spatial_sum();
                    let Grads { input, params } = z.backward(&gz)?;
                    (gs.broadcast_mul_channel(&z.output)?.add(&input)?, params)
                }
                None => (gs.clone(), Vec::new()),
            };
            let Grads { input: g, params: pb3 } = b3.backward(&g_b3)?;
            let Grads { input: g, params: pc3 } = c3.backward(&g)?;
            let g = r2.backward(&g)?.input;
            let Grads { input: g, params: pb2 } = b2.backward(&g)?;
            let Grads { input: g, params: pmid } = c2.backward(&g)?;
            let g = r1.backward(&g)?.input;
            let Grads { input: g, params: pb1 } = b1.backward(&g)?;
            let Grads {
                input: mut gx,
                params: pc1,
            } = c1.backward(&g)?;
            let mut pds = Vec::new();
            match &proj {
                Some((cp, bp)) => {
                    let Grads { input: gd, params: pbd } = bp.backward(&gs)?;
                    let Grads {
                        input: gdx,
                        params: pcd,
                    } = cp.backward(&gd)?;
                    gx.add_assign(&gdx)?;
                    pds.extend(pcd);
                    pds.extend(pbd);
                }
                None => gx.add_assign(&gs)?,
            }
            let params = [pc1, pb1, pmid, pb2, pc3, pb3, se_params, pds]
                .into_iter()
                .flatten()
                .collect();
            Ok(Grads { input: gx, params })
        });
        Ok((pair, stats))
    }
}

/// Logits with backward, per-layer batch statistics and activation shapes.
type RunOutput = (GradPair, Vec<Vec<BatchStats>>, Vec<(String, Shape)>);

/// A built network: stem, bottleneck blocks, pooled linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub stem: Conv2dParams,
    pub stem_bn: BatchNormParams,
    pub blocks: Vec<(String, Bottleneck)>,
    pub fc: LinearParams,
    names: Vec<(String, bool)>,
}

/// Builds one of the canonical networks in [`MODEL_NAMES`].
pub fn build_model(name: &str, seed: u64) -> Result<Model> {
    Model::build(ModelSpec::named(name)?, seed)
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = rng::seeded(seed);
        let stem = Conv2dParams::new(3, spec.stem_channels, 7, 2, 3, 1, &mut rng)?;
        let stem_bn = BatchNormParams::new(spec.stem_channels)?;
        let blocks = spec
            .block_specs()?
            .into_iter()
            .map(|(name, bs)| Ok((name, Bottleneck::new(bs, &mut rng)?)))
            .collect::<Result<Vec<_>>>()?;
        let fc = LinearParams::new(spec.final_channels(), spec.num_classes, true, &mut rng)?;
        let mut model = Model {
            spec,
            stem,
            stem_bn,
            blocks,
            fc,
            names: Vec::new(),
        };
        model.names = model.param_iter().map(|(name, _, decay)| (name, decay)).collect();
        Ok(model)
    }

    fn param_iter(&self) -> impl Iterator<Item = (String, &Tensor, bool)> {
        let head = [
            ("conv1.weight".to_string(), &self.stem.weight, true),
            ("bn1.weight".to_string(), &self.stem_bn.gamma, false),
            ("bn1.bias".to_string(), &self.stem_bn.beta, false),
        ];
        let blocks = self.blocks.iter().flat_map(|(prefix, b)| {
            b.named_params()
                .into_iter()
                .map(move |(n, t, d)| (format!("{prefix}.{n}"), t, d))
        });
        let mut tail = vec![("fc.weight".to_string(), &self.fc.weight, true)];
        if let Some(b) = &self.fc.bias {
            tail.push(("fc.bias".to_string(), b, false));
        }
        head.into_iter().chain(blocks).chain(tail)
    }

    /// All trainable tensors in gradient order. Running statistics are excluded.
    pub fn named_params(&self) -> Vec<NamedParam<'_>> {
        self.names
            .iter()
            .zip(self.param_iter())
            .map(|((name, decay), (_, tensor, _))| NamedParam {
                name,
                tensor,
                decay: *decay,
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.stem.params_mut();
        v.extend(self.stem_bn.params_mut());
        for (_, b) in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.fc.params_mut());
        v
    }

    /// Number of trainable scalars, by enumeration of the parameter tensors.
    pub fn param_count(&self) -> usize {
        self.param_iter().map(|(_, t, _)| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected: s.with_channels(3),
                found: s,
            });
        }
        if s.h < MIN_INPUT_SIZE || s.w < MIN_INPUT_SIZE {
            return Err(Error::InputTooSmall {
                min: MIN_INPUT_SIZE,
                found: s.h.min(s.w),
            });
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, training: bool) -> Result<RunOutput> {
        self.check_input(x)?;
        let mut shapes = Vec::new();
        let mut stats = Vec::new();
        let mut layers: Vec<GradPair> = Vec::new();
        let stem = conv2d(x, &self.stem)?;
        shapes.push(("stem".to_string(), stem.output.shape()));
        let (bn, s) = self.stem_bn.forward(&stem.output, training)?;
        stats.push(s.into_iter().collect::<Vec<_>>());
        let act = relu(&bn.output)?;
        let pool = max_pool(&act.output, 3, 2, 1)?;
        shapes.push(("maxpool".to_string(), pool.output.shape()));
        let mut h = pool.output.clone();
        layers.extend([stem, bn, act, pool]);
        for (name, block) in &self.blocks {
            let (pair, s) = block.forward(&h, training)?;
            h = pair.output.clone();
            shapes.push((name.clone(), h.shape()));
            stats.push(s);
            layers.push(pair);
        }
        let gap = global_avg_pool_op(&h)?;
        let fc = linear(&gap.output, &self.fc)?;
        shapes.push(("fc".to_string(), fc.output.shape()));
        layers.push(gap);
        layers.push(fc);
        let output = layers.last().map(|l| l.output.clone()).expect("non-empty layer list");
        let pair = GradPair::new(output, move |g| {
            let mut g = g.clone();
            let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(layers.len());
            for layer in layers.iter().rev() {
                let Grads { input, params } = layer.backward(&g)?;
                per_layer.push(params);
                g = input;
            }
            let params = per_layer.into_iter().rev().flatten().collect();
            Ok(Grads { input: g, params })
        });
        Ok((pair, stats, shapes))
    }

    /// Eval-mode forward; logits shaped `(N, num_classes, 1, 1)`.
    pub fn forward(&self, x: &Tensor) -> Result<GradPair> {
        Ok(self.run(x, false)?.0)
    }

    /// Training-mode forward: batch statistics normalize the activations and
    /// are folded into the running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<GradPair> {
        let (pair, stats, _) = self.run(x, true)?;
        let mut it = stats.into_iter();
        if let Some(s) = it.next().and_then(|s| s.into_iter().next()) {
            self.stem_bn.update_running(&s);
        }
        for ((_, block), s) in self.blocks.iter_mut().zip(it) {
            block.apply_stats(&s);
        }
        Ok(pair)
    }

    /// Activation shapes after the stem, the max pool, every block and the head.
    pub fn feature_shapes(&self, x: &Tensor) -> Result<Vec<(String, Shape)>> {
        Ok(self.run(x, false)?.2)
    }
}

/// One row of the stage table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDescription {
    pub repeats: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub kind: BlockKind,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psa: Option<PsaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_reduction: Option<usize>,
    pub output_size: usize,
    /// Bracket notation, e.g. `[1×1,64; PSA,64; 1×1,256] ×3`.
    pub layers: String,
}

/// Layer listing of a model at a given square input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub name: String,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub input_size: usize,
    pub stages: Vec<StageDescription>,
    /// Spatial size after stem, max pool, each stage and the pooled head.
    pub output_sizes: Vec<usize>,
    pub stem: String,
    pub pool: String,
    pub head: String,
}

fn conv_out(size: usize, k: usize, s: usize, p: usize) -> usize {
    (size + 2 * p - k) / s + 1
}

/// Stage-by-stage listing with bracket notation and output sizes.
pub fn describe(spec: &ModelSpec, input_size: usize) -> Result<Description> {
    spec.validate()?;
    if input_size < MIN_INPUT_SIZE {
        return Err(Error::InputTooSmall {
            min: MIN_INPUT_SIZE,
            found: input_size,
        });
    }
    let stem_size = conv_out(input_size, 7, 2, 3);
    let pool_size = conv_out(stem_size, 3, 2, 1);
    let mut output_sizes = vec![stem_size, pool_size];
    let mut size = pool_size;
    let mut stages = Vec::new();
    for (i, st) in spec.stages.iter().enumerate() {
        let stride = spec.stage_stride(i);
        size = conv_out(size, 1, stride, 0);
        output_sizes.push(size);
        let mid = match (&st.psa, st.kind) {
            (Some(p), BlockKind::Epsa) => format!("{},{}", p.label(), st.mid_channels),
            _ => format!("3×3,{}", st.mid_channels),
        };
        let se = match st.kind {
            BlockKind::Se => format!("; SE(r={})", st.se_reduction.unwrap_or(16)),
            _ => String::new(),
        };
        let layers = format!(
            "[1×1,{}; {mid}; 1×1,{}{se}] ×{}",
            st.mid_channels,
            st.out_channels(),
            st.repeats
        );
        stages.push(StageDescription {
            repeats: st.repeats,
            mid_channels: st.mid_channels,
            out_channels: st.out_channels(),
            kind: st.kind,
            stride,
            psa: st.psa.clone(),
            se_reduction: st.se_reduction,
            output_size: size,
            layers,
        });
    }
    output_sizes.push(1);
    Ok(Description {
        name: spec.name.clone(),
        num_classes: spec.num_classes,
        stem_channels: spec.stem_channels,
        input_size,
        stages,
        output_sizes,
        stem: format!("7×7, {}, stride 2", spec.stem_channels),
        pool: "3×3 max pool, stride 2".into(),
        head: format!("{size}×{size} global average pool, {}-d fc", spec.num_classes),
    })
}

/// The kernel/group ablation settings at the first-stage width (64 channels).
pub fn ablation_configs() -> Vec<PsaConfig> {
    ABLATION_GROUPS
        .iter()
        .map(|g| PsaConfig::new(64).with_groups(g))
        .collect()
}
