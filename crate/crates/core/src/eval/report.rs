use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::classify::{classification_metrics, normalize_label};
use super::rouge::rouge_scores;
use crate::model::{generate_greedy, GenerationLimits, ModelConfig, Tokenizer, Weights};
use crate::{Error, Result, StageLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Generation,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub task: String,
    pub kind: TaskKind,
    pub prompt: String,
    pub reference: String,
    #[serde(default)]
    pub prediction: Option<String>,
}

/// Metrics of one task. Generation tasks fill the ROUGE columns,
/// classification tasks the precision/recall/F1 columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub kind: TaskKind,
    pub n: usize,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub rl: Option<f64>,
    pub rlsum: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1_micro: Option<f64>,
    /// Samples whose decoding failed (scored as empty predictions).
    pub failures: usize,
    /// Generation samples where both texts were empty.
    pub empty_pairs: usize,
    /// Classification predictions outside the label set.
    pub invalid: usize,
}

impl TaskMetrics {
    /// Column symbol and value pairs, in table order.
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        for (k, v) in [
            ("R1", self.r1),
            ("R2", self.r2),
            ("RL", self.rl),
            ("RLsum", self.rlsum),
            ("Precision", self.precision),
            ("Recall", self.recall),
            ("F1-micro", self.f1_micro),
        ] {
            if let Some(v) = v {
                out.push((k, v));
            }
        }
        out
    }

    /// Headline metric: F1-micro for classification, RL for generation.
    pub fn primary(&self) -> f64 {
        match self.kind {
            TaskKind::Classification => self.f1_micro.unwrap_or(0.0),
            TaskKind::Generation => self.rl.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stage: StageLabel,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricReport {
    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }

    pub fn total_samples(&self) -> usize {
        self.tasks.iter().map(|t| t.n).sum()
    }
}

/// Scores already-predicted samples. Missing predictions count as empty text.
///
/// Classification label sets come from `label_sets` when given for a task,
/// otherwise from the distinct references of that task.
pub fn score_samples(
    stage: StageLabel,
    samples: &[EvalSample],
    label_sets: &BTreeMap<String, Vec<String>>,
    failures: &BTreeMap<String, usize>,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_task: BTreeMap<&str, Vec<&EvalSample>> = BTreeMap::new();
    for s in samples {
        by_task.entry(s.task.as_str()).or_default().push(s);
    }
    let mut tasks = Vec::new();
    for (name, group) in by_task {
        let kind = group[0].kind;
        if group.iter().any(|s| s.kind != kind) {
            return Err(Error::Config(alloc::format!(
                "task `{name}` mixes sample kinds"
            )));
        }
        let pred = |s: &EvalSample| s.prediction.clone().unwrap_or_default();
        let mut m = TaskMetrics {
            task: name.into(),
            kind,
            n: group.len(),
            r1: None,
            r2: None,
            rl: None,
            rlsum: None,
            precision: None,
            recall: None,
            f1_micro: None,
            failures: failures.get(name).copied().unwrap_or(0),
            empty_pairs: 0,
            invalid: 0,
        };
        match kind {
            TaskKind::Generation => {
                let mut sums = [0.0f64; 4];
                for s in &group {
                    let r = rouge_scores(&pred(s), &s.reference);
                    sums[0] += r.r1;
                    sums[1] += r.r2;
                    sums[2] += r.rl;
                    sums[3] += r.rlsum;
                    m.empty_pairs += r.both_empty as usize;
                }
                let n = group.len() as f64;
                m.r1 = Some(sums[0] / n);
                m.r2 = Some(sums[1] / n);
                m.rl = Some(sums[2] / n);
                m.rlsum = Some(sums[3] / n);
            }
            TaskKind::Classification => {
                let labels: Vec<String> = match label_sets.get(name) {
                    Some(l) => l.clone(),
                    None => {
                        let mut l: Vec<String> = group
                            .iter()
                            .map(|s| normalize_label(&s.reference))
                            .collect();
                        l.sort();
                        l.dedup();
                        l
                    }
                };
                let preds: Vec<String> = group.iter().map(|s| pred(s)).collect();
                let refs: Vec<String> = group.iter().map(|s| s.reference.clone()).collect();
                let c = classification_metrics(&preds, &refs, &labels)?;
                m.precision = Some(c.precision);
                m.recall = Some(c.recall);
                m.f1_micro = Some(c.f1_micro);
                m.invalid = c.invalid;
            }
        }
        tasks.push(m);
    }
    Ok(MetricReport { stage, tasks })
}

/// Greedy-decodes every sample with `w` and scores the predictions.
///
/// A sample whose decoding fails gets an empty prediction and is counted in
/// its task's `failures`; the run continues.
pub fn evaluate_stage<W: Weights<f32> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    stage: StageLabel,
    samples: &[EvalSample],
    label_sets: &BTreeMap<String, Vec<String>>,
    limits: &GenerationLimits,
) -> Result<(MetricReport, Vec<EvalSample>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let prompt = Tokenizer::encode_prompt(&s.prompt);
        let prediction = match generate_greedy(w, cfg, &prompt, limits) {
            Ok(ids) => Tokenizer::decode(&ids),
            Err(_) => {
                *failures.entry(s.task.clone()).or_insert(0) += 1;
                String::new()
            }
        };
        let mut s = s.clone();
        s.prediction = Some(prediction);
        out.push(s);
    }
    let report = score_samples(stage, &out, label_sets, &failures)?;
    Ok((report, out))
}
