use std::path::Path;

use epsakit_core::model::{ModelSpec, MODEL_NAMES};
use epsakit_core::train::{ToySettings, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULTS_VERSION: u32 = 1;
const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckDefaults {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityDefaults {
    pub input_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationDefaults {
    pub input_size: usize,
    pub seed: u64,
}

/// Contents of `defaults.toml`, compiled into the binary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub version: u32,
    pub train: TrainConfig,
    pub toy: ToySettings,
    pub gradcheck: GradcheckDefaults,
    pub complexity: ComplexityDefaults,
    pub ablation: AblationDefaults,
}

impl Defaults {
    pub fn parse(text: &str) -> Result<Self> {
        let d: Defaults = toml::from_str(text).map_err(|e| Error::Defaults(e.to_string()))?;
        if d.version != DEFAULTS_VERSION {
            return Err(Error::Defaults(format!(
                "version {} (expected {DEFAULTS_VERSION})",
                d.version
            )));
        }
        d.train.validate()?;
        Ok(d)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULTS_TOML).expect("bundled defaults.toml is valid")
    }
}

/// A canonical model name, or a path to a JSON model config.
pub fn resolve_model(arg: &str) -> Result<ModelSpec> {
    if MODEL_NAMES.contains(&arg) {
        return ModelSpec::named(arg).map_err(Error::from);
    }
    let path = Path::new(arg);
    if path.extension().is_some_and(|e| e == "json") || path.exists() {
        return load_model_config(path);
    }
    Err(epsakit_core::Error::UnknownModel(arg.to_string()).into())
}

pub fn load_model_config(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: ModelSpec = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    spec.validate()?;
    Ok(spec)
}
