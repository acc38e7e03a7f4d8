//! Plain-text renderings of the machine-readable outputs.

use std::fmt::Write as _;

use epsakit_core::complexity::{Comparison, ComplexityReport};
use epsakit_core::gradcheck::GradcheckReport;
use epsakit_core::model::Description;
use epsakit_core::train::TrainSummary;
use epsakit_core::Shape;

use crate::ablation::Ablation;

/// Column-aligned table; the first column is left-aligned, the rest right-aligned.
#[derive(Debug, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) {
        self.rows.push(cells.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let ncol = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let mut parts = Vec::with_capacity(ncol);
            for (i, (c, &w)) in cells.iter().zip(&widths).enumerate() {
                let pad = w - c.chars().count();
                parts.push(if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                });
            }
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, &self.header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule);
        for r in &self.rows {
            line(&mut out, r);
        }
        out
    }
}

fn shape4(s: Shape) -> String {
    format!("{}×{}×{}×{}", s.n, s.c, s.h, s.w)
}

pub fn describe(d: &Description) -> String {
    let mut t = Table::new(["layer", "output", "spec"]);
    let size = |v: usize| format!("{v}×{v}");
    t.row(["conv1".to_string(), size(d.output_sizes[0]), d.stem.clone()]);
    t.row(["pool".to_string(), size(d.output_sizes[1]), d.pool.clone()]);
    for (i, s) in d.stages.iter().enumerate() {
        t.row([format!("layer{}", i + 1), size(s.output_size), s.layers.clone()]);
    }
    t.row(["head".to_string(), size(1), d.head.clone()]);
    format!(
        "{}  (input {}×{}, {} classes)\n{}",
        d.name,
        d.input_size,
        d.input_size,
        d.num_classes,
        t.render()
    )
}

pub fn complexity(reports: &[ComplexityReport], cmp: &Comparison, per_layer: bool) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        let _ = writeln!(out, "input: {}", shape4(first.input_shape));
    }
    let _ = writeln!(out, "convention: {} ({})", rule_name(cmp), cmp.convention.description);
    let mut t = Table::new([
        "model",
        "params",
        "params (M)",
        "FLOPs",
        "FLOPs (G)",
        "Δ params",
        "Δ FLOPs",
    ]);
    for r in &cmp.rows {
        t.row([
            r.model_name.clone(),
            r.params.to_string(),
            format!("{:.2}", r.params_millions),
            r.flops.to_string(),
            format!("{:.2}", r.flops_giga),
            format!("{:+.2}%", r.params_delta_pct),
            format!("{:+.2}%", r.flops_delta_pct),
        ]);
    }
    let _ = write!(out, "{}", t.render());
    if reports.len() > 1 {
        let _ = writeln!(out, "deltas relative to {}", cmp.baseline);
    }
    if per_layer {
        for r in reports {
            let mut t = Table::new(["layer", "params", "FLOPs", "output"]);
            for l in &r.per_layer {
                t.row([
                    l.name.clone(),
                    l.params.to_string(),
                    l.flops.to_string(),
                    shape4(l.output_shape),
                ]);
            }
            let _ = write!(out, "\n{}\n{}", r.model_name, t.render());
        }
    }
    out
}

fn rule_name(cmp: &Comparison) -> String {
    serde_json::to_value(cmp.convention.rule)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn gradcheck(r: &GradcheckReport) -> String {
    let mut t = Table::new(["operator", "input", "tensors", "max rel err", "kinks skipped", "status"]);
    for c in &r.results {
        t.row([
            c.operator.clone(),
            shape4(c.input_shape),
            c.tensors.to_string(),
            format!("{:.3e}", c.max_rel_error),
            c.nonsmooth_skipped.to_string(),
            if c.passed { "ok" } else { "FAIL" }.to_string(),
        ]);
    }
    format!(
        "gradcheck {} (seed {}, eps {:e}, tolerance {:e})\n{}{}: worst {:.3e}\n",
        r.scope.name(),
        r.seed,
        r.epsilon,
        r.tolerance,
        t.render(),
        if r.passed { "PASS" } else { "FAIL" },
        r.worst()
    )
}

pub fn train_summary(s: &TrainSummary) -> String {
    let mut t = Table::new(["metric", "value"]);
    t.row(["steps".to_string(), s.steps.to_string()]);
    t.row(["epochs".to_string(), s.epochs.to_string()]);
    t.row(["initial loss".to_string(), format!("{:.6}", s.initial_loss)]);
    t.row(["final loss".to_string(), format!("{:.6}", s.final_loss)]);
    t.row(["loss floor".to_string(), format!("{:.6}", s.loss_floor)]);
    t.row([
        "excess loss reduction".to_string(),
        format!("{:.4}", s.excess_loss_reduction),
    ]);
    t.row([
        "final train accuracy".to_string(),
        format!("{:.4}", s.final_train_accuracy),
    ]);
    t.row(["eval accuracy".to_string(), format!("{:.4}", s.eval_accuracy)]);
    let status = if s.no_learning { "no-learning" } else { "learning" };
    format!("{}status: {status}\n", t.render())
}

pub fn ablation(a: &Ablation) -> String {
    let mut t = Table::new([
        "kernels",
        "groups",
        "params (M)",
        "FLOPs (G)",
        "params",
        "FLOPs",
        "forward",
        "default",
    ]);
    let list = |v: &[usize]| format!("({})", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
    for r in &a.rows {
        t.row([
            list(&r.kernels),
            list(&r.groups),
            format!("{:.2}", r.params_millions),
            format!("{:.2}", r.flops_giga),
            r.params.to_string(),
            r.flops.to_string(),
            if r.forward_finite {
                format!("finite {}", shape4(r.logits_shape))
            } else {
                "NON-FINITE".into()
            },
            if r.is_default { "yes" } else { "" }.to_string(),
        ]);
    }
    format!(
        "group-size ablation (FLOPs at 224×224, forward smoke test at {0}×{0})\n{1}",
        a.smoke_input_size,
        t.render()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_columns() {
        let mut t = Table::new(["name", "n"]);
        t.row(["a", "100"]);
        t.row(["longer", "7"]);
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "name      n");
        assert_eq!(lines[2], "a       100");
        assert_eq!(lines[3], "longer    7");
    }
}
