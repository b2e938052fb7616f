#![allow(dead_code)]

use std::collections::BTreeMap;

use ptqlora::manifest::{RunManifest, StageRecord};
use ptqlora_core::eval::{MetricReport, TaskKind, TaskMetrics};
use ptqlora_core::{QuantMethod, StageLabel};
use serde::Deserialize;

pub fn classification(task: &str, f1: f64) -> TaskMetrics {
    TaskMetrics {
        task: task.into(),
        kind: TaskKind::Classification,
        n: 100,
        r1: None,
        r2: None,
        rl: None,
        rlsum: None,
        precision: Some(f1),
        recall: Some(f1),
        f1_micro: Some(f1),
        failures: 0,
        empty_pairs: 0,
        invalid: 0,
    }
}

pub fn generation(task: &str, r1: f64) -> TaskMetrics {
    TaskMetrics {
        task: task.into(),
        kind: TaskKind::Generation,
        n: 100,
        r1: Some(r1),
        r2: Some(r1 / 2.0),
        rl: Some(r1 * 0.75),
        rlsum: Some(r1 * 0.8),
        precision: None,
        recall: None,
        f1_micro: None,
        failures: 0,
        empty_pairs: 0,
        invalid: 0,
    }
}

/// A manifest with the three stages of `method`, given per-stage task metrics.
pub fn manifest(seed: u64, method: QuantMethod, stages: [Vec<TaskMetrics>; 3]) -> RunManifest {
    let mut m = RunManifest::new("cfg".into(), "s1".into(), seed, method);
    for (label, tasks) in RunManifest::expected_order(method).into_iter().zip(stages) {
        m.push(StageRecord {
            label,
            checkpoint: format!("stage{}.pqlr", label.stage_number()).into(),
            checkpoint_sha256: String::new(),
            dataset_hash: None,
            epoch_losses: Vec::new(),
            bits_per_weight: None,
            metrics: MetricReport {
                stage: label,
                tasks,
            },
            wall_clock_secs: 0.0,
        })
        .unwrap();
    }
    m
}

#[derive(Deserialize)]
struct Fixture {
    rows: Vec<Row>,
}

#[derive(Deserialize)]
pub struct Row {
    pub model: String,
    pub method: QuantMethod,
    pub task: String,
    pub sft: f64,
    pub ptq: f64,
    pub qlora: f64,
}

pub fn reference_rows() -> Vec<Row> {
    let text = include_str!("../fixtures/reference_results.json");
    serde_json::from_str::<Fixture>(text).unwrap().rows
}

/// One manifest per (model, method) holding the reference classification cells.
pub fn reference_manifests() -> Vec<RunManifest> {
    let mut groups: BTreeMap<(String, QuantMethod), Vec<Row>> = BTreeMap::new();
    for r in reference_rows() {
        groups
            .entry((r.model.clone(), r.method))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((model, method), rows)| {
            let cells = |f: fn(&Row) -> f64| -> Vec<TaskMetrics> {
                rows.iter().map(|r| classification(&r.task, f(r))).collect()
            };
            let mut m = manifest(
                0,
                method,
                [cells(|r| r.sft), cells(|r| r.ptq), cells(|r| r.qlora)],
            );
            m.tag = Some(model);
            m
        })
        .collect()
}

pub fn stage_of(m: &RunManifest, label: StageLabel) -> &MetricReport {
    &m.stage(label).unwrap().metrics
}
