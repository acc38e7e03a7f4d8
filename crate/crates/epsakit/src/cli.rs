//! Argument parsing and subcommand dispatch for the `epsakit` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use epsakit_core::complexity::{calibrate, compare, report, Calibration, Comparison, ComplexityReport, FlopConvention};
use epsakit_core::gradcheck::Scope;
use epsakit_core::model::{describe, Model, ModelSpec};
use epsakit_core::train::{make_toy_dataset, train, TrainConfig};
use epsakit_core::Shape;
use serde::Serialize;

use crate::config::{load_model_config, resolve_model, Defaults};
use crate::error::{exit, Error, Result};
use crate::{ablation, history, parallel, report as text, t4};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Psa,
    Block,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::Ops => Scope::Ops,
            ScopeArg::Psa => Scope::Psa,
            ScopeArg::Block => Scope::Block,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Macs,
    MacsPlusElementwise,
    TwiceMacs,
}

impl From<ConventionArg> for FlopConvention {
    fn from(c: ConventionArg) -> FlopConvention {
        match c {
            ConventionArg::Macs => FlopConvention::Macs,
            ConventionArg::MacsPlusElementwise => FlopConvention::MacsPlusElementwise,
            ConventionArg::TwiceMacs => FlopConvention::TwiceMacs,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "epsakit",
    version,
    about = "Pyramid squeeze attention networks: structure, cost and gradient tooling"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write the report to this file instead of stdout (a directory for train-toy).
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Seed for weight initialization and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Square input resolution.
    #[arg(long, global = true)]
    pub input_size: Option<usize>,
    /// JSON model config used in place of (or in addition to) named models.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Alternative defaults file (TOML, same layout as the bundled one).
    #[arg(long, global = true)]
    pub defaults: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage-by-stage layout with output sizes.
    Describe {
        /// Model name or path to a JSON model config.
        model: Option<String>,
    },
    /// Parameter and FLOP totals, compared against the first model.
    Complexity {
        /// Model names or JSON config paths.
        models: Vec<String>,
        /// Include the per-layer breakdown.
        #[arg(long)]
        per_layer: bool,
        /// Override the calibrated FLOP counting rule.
        #[arg(long, value_enum)]
        convention: Option<ConventionArg>,
    },
    /// Finite-difference check of analytic gradients.
    Gradcheck {
        #[arg(value_enum)]
        scope: ScopeArg,
        /// Scale analytic input gradients to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train the reduced model on the synthetic overfitting fixture.
    TrainToy {
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Also write the trained parameters as a .t4 file.
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Group-size ablation of EPSANet-50.
    Ablation,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let defaults = match &g.defaults {
        Some(p) => Defaults::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Defaults::builtin(),
    };
    match &cli.command {
        Command::Describe { model } => {
            let spec = match (model, &g.config) {
                (Some(m), _) => resolve_model(m)?,
                (None, Some(p)) => load_model_config(p)?,
                (None, None) => return Err(usage("describe needs a model name or --config")),
            };
            let d = describe(&spec, g.input_size.unwrap_or(defaults.complexity.input_size))?;
            emit(g, || text::describe(&d), &d)
        }
        Command::Complexity {
            models,
            per_layer,
            convention,
        } => {
            let mut specs = models.iter().map(|m| resolve_model(m)).collect::<Result<Vec<_>>>()?;
            if let Some(p) = &g.config {
                specs.push(load_model_config(p)?);
            }
            if specs.is_empty() {
                return Err(usage("complexity needs at least one model or --config"));
            }
            complexity(g, &defaults, &specs, *per_layer, *convention)
        }
        Command::Gradcheck {
            scope,
            corrupt_backward,
        } => {
            let seed = g.seed.unwrap_or(defaults.gradcheck.seed);
            let r = parallel::gradcheck((*scope).into(), seed, *corrupt_backward)?;
            emit(g, || text::gradcheck(&r), &r)?;
            if r.passed {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradcheck {} failed: worst relative error {:.3e} exceeds {:e}",
                    r.scope.name(),
                    r.worst(),
                    r.tolerance
                )))
            }
        }
        Command::TrainToy {
            lr,
            epochs,
            batch_size,
            save_params,
        } => {
            let mut cfg = defaults.train.clone();
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.seed = g.seed.unwrap_or(cfg.seed);
            let mut toy = defaults.toy.clone();
            toy.image_size = g.input_size.unwrap_or(toy.image_size);
            train_toy(g, &cfg, &toy, save_params.as_deref())
        }
        Command::Ablation => {
            let size = g.input_size.unwrap_or(defaults.ablation.input_size);
            let a = ablation::run_ablation(size, g.seed.unwrap_or(defaults.ablation.seed))?;
            emit(g, || text::ablation(&a), &a)?;
            if a.all_finite() {
                Ok(())
            } else {
                Err(Error::Numerical("ablation forward produced non-finite logits".into()))
            }
        }
    }
}

fn usage(msg: &str) -> Error {
    epsakit_core::Error::InvalidConfig(msg.to_string()).into()
}

#[derive(Serialize)]
struct ComplexityOutput<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<&'a Calibration>,
    reports: &'a [ComplexityReport],
    comparison: &'a Comparison,
}

fn complexity(
    g: &Global,
    defaults: &Defaults,
    specs: &[ModelSpec],
    per_layer: bool,
    convention: Option<ConventionArg>,
) -> Result<()> {
    let calibration = match convention {
        Some(_) => None,
        None => Some(calibrate()?),
    };
    let rule = convention
        .map(FlopConvention::from)
        .or(calibration.as_ref().map(|c| c.convention))
        .expect("convention chosen");
    let size = g.input_size.unwrap_or(defaults.complexity.input_size);
    let input = Shape::new(1, 3, size, size)?;
    let mut reports = specs
        .iter()
        .map(|s| report(s, input, rule))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let cmp = compare(&reports)?;
    if !per_layer {
        for r in &mut reports {
            r.per_layer.clear();
        }
    }
    let out = ComplexityOutput {
        calibration: calibration.as_ref(),
        reports: &reports,
        comparison: &cmp,
    };
    emit(g, || text::complexity(&reports, &cmp, per_layer), &out)
}

fn train_toy(g: &Global, cfg: &TrainConfig, toy: &epsakit_core::train::ToySettings, save: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let data = make_toy_dataset(cfg.seed, toy.samples, toy.classes, toy.image_size)?;
    let mut model = Model::build(ModelSpec::toy(toy.classes), cfg.seed)?;
    let h = train(&mut model, &data, cfg)?;
    if let Some(p) = save {
        t4::save_params(p, &model)?;
    }
    if let Some(dir) = &g.output {
        history::write_history(dir, &h)?;
    }
    let body = match g.format {
        Format::Text => text::train_summary(&h.summary),
        Format::Json => json(&h.summary)?,
    };
    print(&body)
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn emit<T: Serialize>(g: &Global, text: impl FnOnce() -> String, value: &T) -> Result<()> {
    let body = match g.format {
        Format::Text => text(),
        Format::Json => json(value)?,
    };
    match &g.output {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::io(p, e)),
        None => print(&body),
    }
}

fn print(body: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(body.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}
