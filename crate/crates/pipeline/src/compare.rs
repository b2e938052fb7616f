//! Paired significance tests between two stages across runs.

use std::fmt::Write as _;

use ptqlora_core::eval::{PairedScores, TaskMetrics, WilcoxonMode};

use crate::error::{PipelineError, Result};
use crate::manifest::RunManifest;

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSpec {
    /// Stage label pattern; `*` matches any run of characters.
    pub stage_a: String,
    pub stage_b: String,
    /// Column symbol (`F1-micro`, `R1`, ...), a lowercase alias, or `primary`.
    pub metric: String,
    /// Restrict to one task.
    pub task: Option<String>,
    pub mode: WilcoxonMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub spec: CompareSpec,
    /// Differences are `a − b` per condition.
    pub pairs: PairedScores,
}

impl Comparison {
    pub fn p_value(&self) -> f64 {
        self.pairs.result.as_ref().map_or(1.0, |r| r.p_value)
    }

    pub fn significant(&self) -> bool {
        self.pairs
            .result
            .as_ref()
            .is_some_and(|r| !r.degenerate && r.p_value <= ALPHA)
    }

    pub fn degenerate(&self) -> bool {
        self.pairs.result.as_ref().is_some_and(|r| r.degenerate)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let r = self
            .pairs
            .result
            .as_ref()
            .expect("comparison carries a result");
        writeln!(
            out,
            "{} vs {} on {} ({} pairs)",
            self.spec.stage_a,
            self.spec.stage_b,
            self.spec.metric,
            self.pairs.len()
        )
        .expect("write to string");
        for ((c, a), b) in self
            .pairs
            .conditions
            .iter()
            .zip(&self.pairs.a)
            .zip(&self.pairs.b)
        {
            writeln!(out, "  {c:<40} {a:.4}  {b:.4}  {:+.4}", a - b).expect("write to string");
        }
        writeln!(
            out,
            "W+ = {}  W- = {}  n_effective = {}  p = {:.6}  ({})  median diff = {:+.4}",
            r.w_plus, r.w_minus, r.n_effective, r.p_value, r.mode, r.median_difference
        )
        .expect("write to string");
        let verdict = if r.degenerate {
            "degenerate: every difference is zero, p = 1".to_string()
        } else if self.significant() {
            format!("significant at {ALPHA}")
        } else {
            format!("not significant at {ALPHA}")
        };
        writeln!(out, "{verdict}").expect("write to string");
        out
    }
}

/// Glob match where `*` spans any run of characters.
pub fn stage_matches(pattern: &str, label: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == label;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !label.starts_with(first) || !label[first.len()..].ends_with(last) {
        return false;
    }
    let mut rest = &label[first.len()..label.len() - last.len()];
    for p in &parts[1..parts.len() - 1] {
        match rest.find(p) {
            Some(i) => rest = &rest[i + p.len()..],
            None => return false,
        }
    }
    true
}

fn metric_value(t: &TaskMetrics, metric: &str) -> Option<f64> {
    let want = match metric.to_ascii_lowercase().as_str() {
        "primary" => return Some(t.primary()),
        "r1" | "rouge1" => "R1",
        "r2" | "rouge2" => "R2",
        "rl" | "rougel" => "RL",
        "rlsum" | "rougelsum" => "RLsum",
        "precision" => "Precision",
        "recall" => "Recall",
        "f1" | "f1-micro" | "f1_micro" => "F1-micro",
        _ => return None,
    };
    t.columns()
        .into_iter()
        .find(|(k, _)| *k == want)
        .map(|(_, v)| v)
}

/// Pairs `(a, b)` per (run condition, method, task) and runs the signed-rank
/// test. Runs missing either stage are skipped. All-zero differences give a
/// degenerate result (p = 1), not an error.
pub fn compare_stages(manifests: &[RunManifest], spec: &CompareSpec) -> Result<Comparison> {
    let mut pairs = PairedScores::default();
    for m in manifests {
        let find = |pat: &str| {
            m.stages
                .iter()
                .find(|s| stage_matches(pat, s.label.as_str()))
        };
        let (Some(a), Some(b)) = (find(&spec.stage_a), find(&spec.stage_b)) else {
            continue;
        };
        for ta in &a.metrics.tasks {
            if spec.task.as_ref().is_some_and(|t| *t != ta.task) {
                continue;
            }
            let Some(tb) = b.metrics.task(&ta.task) else {
                continue;
            };
            if let (Some(va), Some(vb)) = (
                metric_value(ta, &spec.metric),
                metric_value(tb, &spec.metric),
            ) {
                pairs.push(
                    format!("{} {} {}", m.condition(), m.method, ta.task),
                    va,
                    vb,
                );
            }
        }
    }
    if pairs.is_empty() {
        return Err(PipelineError::Report(format!(
            "no ({}, {}) pairs with metric `{}`",
            spec.stage_a, spec.stage_b, spec.metric
        )));
    }
    Ok(Comparison {
        spec: spec.clone(),
        pairs: pairs.test(spec.mode)?,
    })
}
