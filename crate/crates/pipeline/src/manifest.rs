//! Per-run record of completed stages.

use std::path::{Path, PathBuf};

use ptqlora_core::eval::MetricReport;
use ptqlora_core::{QuantMethod, StageLabel};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub label: StageLabel,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    /// Hash of the records this stage trained on (calibration set for stage 2).
    pub dataset_hash: Option<String>,
    pub epoch_losses: Vec<f64>,
    pub bits_per_weight: Option<f64>,
    pub metrics: MetricReport,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    /// Hash of the settings stage 1 depends on.
    pub stage1_hash: String,
    pub seed: u64,
    pub method: QuantMethod,
    /// Condition name used when pairing runs; defaults to the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    /// Records dropped by the token-budget filter.
    pub dropped_records: usize,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, stage1_hash: String, seed: u64, method: QuantMethod) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash,
            stage1_hash,
            seed,
            method,
            tag: None,
            dropped_records: 0,
            stages: Vec::new(),
        }
    }

    pub fn condition(&self) -> String {
        self.tag
            .clone()
            .unwrap_or_else(|| format!("seed {}", self.seed))
    }

    /// Labels in the order a complete run produces them.
    pub fn expected_order(method: QuantMethod) -> [StageLabel; 3] {
        [
            StageLabel::Sft16Bit,
            StageLabel::Ptq(method),
            StageLabel::PtqQlora(method),
        ]
    }

    pub fn stage(&self, label: StageLabel) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.label == label)
    }

    pub fn is_complete(&self) -> bool {
        self.stages.len() == 3
    }

    pub fn push(&mut self, rec: StageRecord) -> Result<()> {
        let want = Self::expected_order(self.method)
            .get(self.stages.len())
            .copied()
            .ok_or_else(|| PipelineError::Manifest("run already has three stages".into()))?;
        if rec.label != want {
            return Err(PipelineError::Manifest(format!(
                "stage {} recorded out of order, expected {want}",
                rec.label
            )));
        }
        self.stages.push(rec);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let order = Self::expected_order(self.method);
        if self.stages.len() > 3 {
            return Err(PipelineError::Manifest("more than three stages".into()));
        }
        for (s, want) in self.stages.iter().zip(order) {
            if s.label != want {
                return Err(PipelineError::Manifest(format!(
                    "stage {} out of order, expected {want}",
                    s.label
                )));
            }
            if s.metrics.stage != s.label {
                return Err(PipelineError::Manifest(format!(
                    "metrics of {} are labelled {}",
                    s.label, s.metrics.stage
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, self.to_json() + "\n").map_err(|e| PipelineError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| PipelineError::io(&path, e))
    }

    /// Accepts a run directory or the manifest file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| PipelineError::io(&file, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}
