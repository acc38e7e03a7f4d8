//! Analytic parameter and FLOP accounting.
//!
//! Costs are derived from a [`ModelSpec`] without allocating weights, one
//! entry per leaf layer. Multiply-accumulates (conv, linear) and elementwise
//! work (normalization, activations, pooling, bias adds) are tracked
//! separately and combined by a [`FlopConvention`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockKind, BlockSpec, Model, ModelSpec, MIN_INPUT_SIZE};
use crate::psa::PsaConfig;
use crate::tensor::Shape;

/// ResNet-50 at 224x224 under the reference counting rule.
pub const ANCHOR_FLOPS: f64 = 4.12e9;
/// Largest relative miss on the anchor before another convention is tried.
pub const ANCHOR_TOLERANCE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate of a conv or linear layer is one FLOP; nothing else counts.
    Macs,
    /// MACs plus one FLOP per elementwise operation (BN counts two, pooling one per input).
    MacsPlusElementwise,
    /// Two FLOPs per multiply-accumulate.
    TwiceMacs,
}

impl FlopConvention {
    pub const ALL: [FlopConvention; 3] = [Self::Macs, Self::MacsPlusElementwise, Self::TwiceMacs];

    pub fn flops(self, macs: u64, elementwise: u64) -> u64 {
        match self {
            Self::Macs => macs,
            Self::MacsPlusElementwise => macs + elementwise,
            Self::TwiceMacs => 2 * macs,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::Macs => "1 FLOP = 1 conv/linear multiply-accumulate; BN, activations and pooling not counted",
            Self::MacsPlusElementwise => {
                "conv/linear MACs + elementwise ops (BN 2/elem, ReLU/sigmoid/softmax 1/elem, pooling 1/input elem, bias 1/elem)"
            }
            Self::TwiceMacs => "2 FLOPs per conv/linear multiply-accumulate",
        }
    }
}

/// Cost of one leaf layer, batch size one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
    pub output_shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub output_shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConventionInfo {
    pub rule: FlopConvention,
    pub description: String,
}

impl From<FlopConvention> for ConventionInfo {
    fn from(rule: FlopConvention) -> Self {
        ConventionInfo {
            rule,
            description: rule.description().into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model_name: String,
    pub input_shape: Shape,
    pub total_params: u64,
    pub total_flops: u64,
    pub convention: ConventionInfo,
    pub per_layer: Vec<LayerEntry>,
}

impl ComplexityReport {
    /// Parameters in millions, rounded half-up to two decimals.
    pub fn params_millions(&self) -> f64 {
        round_half_up_2(self.total_params as f64 / 1e6)
    }

    /// FLOPs in billions, rounded half-up to two decimals.
    pub fn flops_giga(&self) -> f64 {
        round_half_up_2(self.total_flops as f64 / 1e9)
    }
}

/// Rounds half-up at the second decimal, tolerating binary representation noise.
pub fn round_half_up_2(x: f64) -> f64 {
    libm::floor(x * 100.0 + 0.5 + 1e-9) / 100.0
}

struct Walker {
    layers: Vec<LayerCost>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn numel(s: Shape) -> u64 {
    s.numel() as u64
}

impl Walker {
    fn push(&mut self, name: String, params: u64, macs: u64, elementwise: u64, output_shape: Shape) {
        self.layers.push(LayerCost {
            name,
            params,
            macs,
            elementwise,
            output_shape,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        x: Shape,
        out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Shape> {
        let y = Shape::new(x.n, out, conv_out(x.h, k, stride, pad), conv_out(x.w, k, stride, pad))?;
        let per_out = (x.c / groups * k * k) as u64;
        self.push(name, out as u64 * per_out, numel(y) * per_out, 0, y);
        Ok(y)
    }

    fn bn(&mut self, name: String, x: Shape) -> Shape {
        self.push(name, 2 * x.c as u64, 0, 2 * numel(x), x);
        x
    }

    fn act(&mut self, name: String, x: Shape) -> Shape {
        self.push(name, 0, 0, numel(x), x);
        x
    }

    fn linear(&mut self, name: String, n: usize, inp: usize, out: usize, bias: bool) -> Result<Shape> {
        let y = Shape::new(n, out, 1, 1)?;
        let b = if bias { out as u64 } else { 0 };
        self.push(name, (inp * out) as u64 + b, (n * inp * out) as u64, n as u64 * b, y);
        Ok(y)
    }

    fn gap(&mut self, name: String, x: Shape) -> Result<Shape> {
        let y = Shape::new(x.n, x.c, 1, 1)?;
        self.push(name, 0, 0, numel(x), y);
        Ok(y)
    }

    /// Squeeze-excitation gate on `x`; parameters charged only when `owns_params`.
    fn se(&mut self, name: &str, x: Shape, hidden: usize, bias: bool, owns_params: bool) -> Result<()> {
        let p = self.gap(format!("{name}.avgpool"), x)?;
        let h = self.linear(format!("{name}.fc0"), x.n, x.c, hidden, bias)?;
        self.act(format!("{name}.relu"), h);
        self.linear(format!("{name}.fc1"), x.n, hidden, x.c, bias)?;
        self.act(format!("{name}.sigmoid"), p);
        if !owns_params {
            let start = self.layers.len() - 5;
            for l in &mut self.layers[start..] {
                l.params = 0;
            }
        }
        Ok(())
    }

    fn psa(&mut self, prefix: &str, cfg: &PsaConfig, x: Shape) -> Result<Shape> {
        let cp = cfg.branch_channels();
        let branch_in = x.with_channels(cfg.branch_in_channels());
        let mut branch_shape = None;
        for (i, (&k, &g)) in cfg.kernels.iter().zip(&cfg.groups).enumerate() {
            let y = self.conv(
                format!("{prefix}.branch{i}"),
                branch_in,
                cp,
                k,
                cfg.stride,
                (k - 1) / 2,
                g,
            )?;
            branch_shape = Some(y);
        }
        let y = branch_shape.ok_or_else(|| Error::InvalidConfig("PSA without branches".into()))?;
        for i in 0..cfg.scales {
            let name = if cfg.shared_se {
                format!("{prefix}.se[{i}]")
            } else {
                format!("{prefix}.se{i}")
            };
            self.se(&name, y, cfg.se_hidden(), true, !cfg.shared_se || i == 0)?;
        }
        let logits = Shape::new(x.n, cfg.channels, 1, 1)?;
        self.act(format!("{prefix}.softmax"), logits);
        let out = y.with_channels(cfg.channels);
        self.push(format!("{prefix}.reweight"), 0, 0, 0, out);
        Ok(out)
    }

    fn block(&mut self, prefix: &str, b: &BlockSpec, x: Shape) -> Result<Shape> {
        let h = self.conv(format!("{prefix}.conv1"), x, b.mid_channels, 1, 1, 0, 1)?;
        self.bn(format!("{prefix}.bn1"), h);
        self.act(format!("{prefix}.relu1"), h);
        let h = match &b.psa {
            Some(cfg) => self.psa(&format!("{prefix}.psa"), cfg, h)?,
            None => self.conv(format!("{prefix}.conv2"), h, b.mid_channels, 3, b.stride, 1, 1)?,
        };
        self.bn(format!("{prefix}.bn2"), h);
        self.act(format!("{prefix}.relu2"), h);
        let h = self.conv(format!("{prefix}.conv3"), h, b.out_channels, 1, 1, 0, 1)?;
        self.bn(format!("{prefix}.bn3"), h);
        if b.kind == BlockKind::Se {
            let hidden = (b.out_channels / b.se_reduction.unwrap_or(16)).max(1);
            self.se(&format!("{prefix}.se"), h, hidden, false, true)?;
        }
        if b.needs_projection() {
            let d = self.conv(format!("{prefix}.downsample.0"), x, b.out_channels, 1, b.stride, 0, 1)?;
            self.bn(format!("{prefix}.downsample.1"), d);
        }
        Ok(self.act(format!("{prefix}.relu3"), h))
    }
}

/// Per-layer costs of `spec` on an input of shape `input` (channels must be 3).
pub fn analyze(spec: &ModelSpec, input: Shape) -> Result<Vec<LayerCost>> {
    spec.validate()?;
    if input.c != 3 {
        return Err(Error::ShapeMismatch {
            op: "model input",
            expected: input.with_channels(3),
            found: input,
        });
    }
    if input.h < MIN_INPUT_SIZE || input.w < MIN_INPUT_SIZE {
        return Err(Error::InputTooSmall {
            min: MIN_INPUT_SIZE,
            found: input.h.min(input.w),
        });
    }
    let mut w = Walker { layers: Vec::new() };
    let x = w.conv("conv1".into(), input, spec.stem_channels, 7, 2, 3, 1)?;
    w.bn("bn1".into(), x);
    w.act("relu".into(), x);
    let y = Shape::new(x.n, x.c, conv_out(x.h, 3, 2, 1), conv_out(x.w, 3, 2, 1))?;
    w.push("maxpool".into(), 0, 0, numel(x), y);
    let mut x = y;
    for (name, b) in spec.block_specs()? {
        x = w.block(&name, &b, x)?;
    }
    let p = w.gap("avgpool".into(), x)?;
    w.linear("fc".into(), p.n, p.c, spec.num_classes, true)?;
    Ok(w.layers)
}

/// Default input: one 224x224 RGB image.
pub fn default_input() -> Shape {
    Shape::new(1, 3, 224, 224).expect("static shape")
}

pub fn report(spec: &ModelSpec, input: Shape, convention: FlopConvention) -> Result<ComplexityReport> {
    let layers = analyze(spec, input)?;
    let per_layer: Vec<LayerEntry> = layers
        .into_iter()
        .map(|l| LayerEntry {
            flops: convention.flops(l.macs, l.elementwise),
            name: l.name,
            params: l.params,
            output_shape: l.output_shape,
        })
        .collect();
    Ok(ComplexityReport {
        model_name: spec.name.clone(),
        input_shape: input,
        total_params: per_layer.iter().map(|l| l.params).sum(),
        total_flops: per_layer.iter().map(|l| l.flops).sum(),
        convention: convention.into(),
        per_layer,
    })
}

/// Outcome of calibrating the counting rule on the ResNet-50 anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub convention: FlopConvention,
    pub anchor_flops: u64,
    /// `(convention, flops, relative miss)` for every candidate tried, in order.
    pub candidates: Vec<(FlopConvention, u64, f64)>,
}

/// Picks the first convention in [`FlopConvention::ALL`] whose ResNet-50 count
/// lands within [`ANCHOR_TOLERANCE`] of the anchor, else the closest one.
pub fn calibrate() -> Result<Calibration> {
    let layers = analyze(&ModelSpec::named("resnet50")?, default_input())?;
    let macs: u64 = layers.iter().map(|l| l.macs).sum();
    let elementwise: u64 = layers.iter().map(|l| l.elementwise).sum();
    let candidates: Vec<(FlopConvention, u64, f64)> = FlopConvention::ALL
        .iter()
        .map(|&c| {
            let f = c.flops(macs, elementwise);
            (c, f, libm::fabs(f as f64 - ANCHOR_FLOPS) / ANCHOR_FLOPS)
        })
        .collect();
    let chosen = candidates
        .iter()
        .find(|c| c.2 <= ANCHOR_TOLERANCE)
        .or_else(|| candidates.iter().min_by(|a, b| a.2.total_cmp(&b.2)))
        .copied()
        .expect("non-empty candidate list");
    Ok(Calibration {
        convention: chosen.0,
        anchor_flops: chosen.1,
        candidates,
    })
}

/// Exact trainable-scalar count of a built model.
pub fn count_params(model: &Model) -> u64 {
    model.param_count() as u64
}

/// FLOPs of a built model under the calibrated convention.
pub fn count_flops(model: &Model, input: Shape) -> Result<u64> {
    let convention = calibrate()?.convention;
    Ok(report(&model.spec, input, convention)?.total_flops)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_name: String,
    pub params: u64,
    pub flops: u64,
    pub params_millions: f64,
    pub flops_giga: f64,
    /// Relative change against the baseline, in percent.
    pub params_delta_pct: f64,
    pub flops_delta_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub convention: ConventionInfo,
    pub rows: Vec<ComparisonRow>,
}

/// Tabulates reports with deltas against the first one.
pub fn compare(reports: &[ComplexityReport]) -> Result<Comparison> {
    let base = reports
        .first()
        .ok_or_else(|| Error::InvalidConfig("compare needs at least one report".into()))?;
    let delta = |v: u64, b: u64| 100.0 * (v as f64 - b as f64) / b as f64;
    Ok(Comparison {
        baseline: base.model_name.clone(),
        convention: base.convention.clone(),
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                model_name: r.model_name.clone(),
                params: r.total_params,
                flops: r.total_flops,
                params_millions: r.params_millions(),
                flops_giga: r.flops_giga(),
                params_delta_pct: delta(r.total_params, base.total_params),
                flops_delta_pct: delta(r.total_flops, base.total_flops),
            })
            .collect(),
    })
}
