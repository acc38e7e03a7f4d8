use epsakit_core::complexity::{calibrate, default_input, report, ConventionInfo};
use epsakit_core::model::{ablation_configs, Model, ModelSpec};
use epsakit_core::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model_name: String,
    pub kernels: Vec<usize>,
    pub groups: Vec<usize>,
    pub is_default: bool,
    pub params: u64,
    pub flops: u64,
    pub params_millions: f64,
    pub flops_giga: f64,
    /// Eval-mode forward on one random image at the smoke-test size.
    pub forward_finite: bool,
    pub logits_shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub convention: ConventionInfo,
    pub smoke_input_size: usize,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.forward_finite)
    }
}

/// The group-size ablation: complexity at 224x224 plus a forward smoke test.
pub fn run_ablation(smoke_input_size: usize, seed: u64) -> Result<Ablation> {
    let convention = calibrate()?.convention;
    let mut rows = Vec::new();
    for cfg in ablation_configs() {
        let spec = ModelSpec::epsanet50_with_groups(&cfg.groups);
        let r = report(&spec, default_input(), convention)?;
        let model = Model::build(spec.clone(), seed)?;
        let x = Tensor::random_uniform(Shape::new(1, 3, smoke_input_size, smoke_input_size)?, seed, -1.0, 1.0)?;
        let logits = model.forward(&x)?.output;
        rows.push(AblationRow {
            model_name: spec.name,
            is_default: cfg.has_default_kernels_and_groups(),
            kernels: cfg.kernels,
            groups: cfg.groups,
            params: r.total_params,
            flops: r.total_flops,
            params_millions: r.params_millions(),
            flops_giga: r.flops_giga(),
            forward_finite: logits.all_finite(),
            logits_shape: logits.shape(),
        });
    }
    Ok(Ablation {
        convention: convention.into(),
        smoke_input_size,
        rows,
    })
}
