//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! seed = 0
//! model.d_model = 48
//! data.classification.kind = classification_like
//! data.classification.train = 300
//! stage1.lr = 3e-3
//! quant.method = gptq
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ptqlora_core::adapter::LoraConfig;
use ptqlora_core::eval::WilcoxonMode;
use ptqlora_core::model::{GenerationLimits, ModelConfig, Tokenizer, TrainConfig};
use ptqlora_core::quant::{CodebookId, QuantConfig};
use ptqlora_core::QuantMethod;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetKind, GeneratorParams};
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: DatasetKind,
    /// JSON-lines training file; generated synthetically when absent.
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Mixture weight; `None` uses every training record once.
    pub weight: Option<f64>,
    pub params: GeneratorParams,
}

impl DatasetSpec {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: DatasetKind::GeneralInstruction,
            path: None,
            test_path: None,
            train: 0,
            dev: 0,
            test: 0,
            weight: None,
            params: GeneratorParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub train: TrainConfig,
    /// Round-trip the trained weights through IEEE half precision.
    pub half_precision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub train: TrainConfig,
    pub lora: LoraConfig,
    /// Datasets for adapter training; empty means the stage-1 mixture.
    pub datasets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub wilcoxon: WilcoxonMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub limits: GenerationLimits,
    pub datasets: Vec<DatasetSpec>,
    pub stage1: Stage1Config,
    pub quant: QuantConfig,
    pub stage3: Stage3Config,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let limits = GenerationLimits::default();
        let model = ModelConfig {
            max_seq_len: default_seq_len(&limits),
            ..Default::default()
        };
        let mut general = DatasetSpec::new("general");
        general.train = 2500;
        let mut cls = DatasetSpec::new("classification");
        cls.kind = DatasetKind::ClassificationLike;
        cls.train = 300;
        cls.test = 70;
        let mut sum = DatasetSpec::new("summarization");
        sum.kind = DatasetKind::SummarizationLike;
        sum.train = 300;
        sum.test = 30;
        Self {
            seed: 0,
            model,
            limits,
            datasets: vec![general, cls, sum],
            stage1: Stage1Config {
                train: TrainConfig::default(),
                half_precision: false,
            },
            quant: QuantConfig::for_method(QuantMethod::BnbNf4),
            stage3: Stage3Config {
                train: TrainConfig {
                    lr: 1e-2,
                    ..TrainConfig::default()
                },
                lora: LoraConfig::default(),
                datasets: Vec::new(),
            },
            eval: EvalConfig {
                wilcoxon: WilcoxonMode::Auto,
            },
        }
    }
}

fn default_seq_len(l: &GenerationLimits) -> usize {
    l.max_input_tokens + l.max_output_tokens + 1
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| PipelineError::ConfigSyntax {
        line,
        msg: format!("invalid value `{v}` for `{key}`"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(PipelineError::ConfigSyntax {
            line,
            msg: format!("invalid boolean `{v}` for `{key}`"),
        }),
    }
}

fn set_train(tc: &mut TrainConfig, line: usize, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "epochs" => tc.epochs = parse(line, key, v)?,
        "batch_size" => tc.batch_size = parse(line, key, v)?,
        "lr" => tc.lr = parse(line, key, v)?,
        "schedule" => {
            tc.schedule =
                v.parse()
                    .map_err(|e: ptqlora_core::Error| PipelineError::ConfigSyntax {
                        line,
                        msg: e.to_string(),
                    })?
        }
        "warmup_steps" => tc.warmup_steps = parse(line, key, v)?,
        "weight_decay" => tc.optimizer.weight_decay = parse(line, key, v)?,
        "beta1" => tc.optimizer.beta1 = parse(line, key, v)?,
        "beta2" => tc.optimizer.beta2 = parse(line, key, v)?,
        "eps" => tc.optimizer.eps = parse(line, key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    /// Parses config text over the defaults. Declaring any `data.*` key
    /// replaces the default dataset list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut datasets: BTreeMap<String, (usize, DatasetSpec)> = BTreeMap::new();
        let mut max_seq_set = false;
        let mut method_set = None;
        let mut quant_overrides: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, v) = content
                .split_once('=')
                .ok_or_else(|| PipelineError::ConfigSyntax {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                })?;
            let (key, v) = (key.trim(), v.trim());
            let unknown = || PipelineError::ConfigSyntax {
                line,
                msg: format!("unknown key `{key}`"),
            };
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["seed"] => cfg.seed = parse(line, key, v)?,
                ["model", f] => {
                    let m = &mut cfg.model;
                    match *f {
                        "d_model" => m.d_model = parse(line, key, v)?,
                        "n_layers" => m.n_layers = parse(line, key, v)?,
                        "n_heads" => m.n_heads = parse(line, key, v)?,
                        "d_ff" => m.d_ff = parse(line, key, v)?,
                        "max_seq_len" => {
                            m.max_seq_len = parse(line, key, v)?;
                            max_seq_set = true;
                        }
                        "tie_embeddings" => m.tie_embeddings = parse_bool(line, key, v)?,
                        "init_std" => m.init_std = parse(line, key, v)?,
                        _ => return Err(unknown()),
                    }
                }
                ["limits", f] => match *f {
                    "max_input_tokens" => cfg.limits.max_input_tokens = parse(line, key, v)?,
                    "max_output_tokens" => cfg.limits.max_output_tokens = parse(line, key, v)?,
                    _ => return Err(unknown()),
                },
                ["data", name, f] => {
                    let n = datasets.len();
                    let (_, d) = datasets
                        .entry(name.to_string())
                        .or_insert_with(|| (n, DatasetSpec::new(name)));
                    match *f {
                        "kind" => d.kind = v.parse()?,
                        "path" => d.path = Some(PathBuf::from(v)),
                        "test_path" => d.test_path = Some(PathBuf::from(v)),
                        "train" => d.train = parse(line, key, v)?,
                        "dev" => d.dev = parse(line, key, v)?,
                        "test" => d.test = parse(line, key, v)?,
                        "weight" => d.weight = Some(parse(line, key, v)?),
                        "labels" => d.params.labels = parse(line, key, v)?,
                        "distractors" => d.params.distractors = parse(line, key, v)?,
                        _ => return Err(unknown()),
                    }
                }
                ["stage1", f] => {
                    if *f == "half_precision" {
                        cfg.stage1.half_precision = parse_bool(line, key, v)?;
                    } else if *f == "seed" {
                        cfg.stage1.train.seed = parse(line, key, v)?;
                    } else if !set_train(&mut cfg.stage1.train, line, key, f, v)? {
                        return Err(unknown());
                    }
                }
                ["stage3", f] => match *f {
                    "rank" => cfg.stage3.lora.rank = parse(line, key, v)?,
                    "alpha" => cfg.stage3.lora.alpha = parse(line, key, v)?,
                    "targets" => {
                        cfg.stage3.lora.targets = if v == "all" {
                            Vec::new()
                        } else {
                            v.split(',').map(|s| s.trim().to_string()).collect()
                        }
                    }
                    "data" => {
                        cfg.stage3.datasets = if v == "same" {
                            Vec::new()
                        } else {
                            v.split(',').map(|s| s.trim().to_string()).collect()
                        }
                    }
                    "seed" => cfg.stage3.train.seed = parse(line, key, v)?,
                    _ => {
                        if !set_train(&mut cfg.stage3.train, line, key, f, v)? {
                            return Err(unknown());
                        }
                    }
                },
                ["quant", "method"] => {
                    method_set =
                        Some(
                            v.parse::<QuantMethod>()
                                .map_err(|e| PipelineError::ConfigSyntax {
                                    line,
                                    msg: e.to_string(),
                                })?,
                        )
                }
                ["quant", f] => quant_overrides.push((line, f.to_string(), v.to_string())),
                ["eval", "wilcoxon"] => {
                    cfg.eval.wilcoxon =
                        v.parse()
                            .map_err(|e: ptqlora_core::Error| PipelineError::ConfigSyntax {
                                line,
                                msg: e.to_string(),
                            })?
                }
                _ => return Err(unknown()),
            }
        }
        if let Some(m) = method_set {
            cfg.quant = QuantConfig::for_method(m);
        }
        for (line, f, v) in quant_overrides {
            cfg.set_quant(line, &f, &v)?;
        }
        if !datasets.is_empty() {
            let mut ds: Vec<(usize, DatasetSpec)> = datasets.into_values().collect();
            ds.sort_by_key(|(i, _)| *i);
            cfg.datasets = ds.into_iter().map(|(_, d)| d).collect();
        }
        if !max_seq_set {
            cfg.model.max_seq_len = default_seq_len(&cfg.limits);
        }
        // the general stream of stage 1 and stage 3 share the run seed unless set
        cfg.stage1.train.seed = cfg.seed;
        cfg.stage3.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_quant(&mut self, line: usize, f: &str, v: &str) -> Result<()> {
        let key = format!("quant.{f}");
        let q = &mut self.quant;
        match f {
            "codebook" => {
                q.codebook = v
                    .parse::<CodebookId>()
                    .map_err(|e| PipelineError::ConfigSyntax {
                        line,
                        msg: e.to_string(),
                    })?
            }
            "block_size" => q.block_size = parse(line, &key, v)?,
            "double_quant" => {
                q.double_quant_chunk = if parse_bool(line, &key, v)? {
                    Some(
                        q.double_quant_chunk
                            .unwrap_or(ptqlora_core::quant::DEFAULT_CHUNK_SIZE),
                    )
                } else {
                    None
                }
            }
            "chunk_size" => {
                let c = parse(line, &key, v)?;
                if q.double_quant_chunk.is_some() {
                    q.double_quant_chunk = Some(c);
                }
            }
            "damping" => q.gptq.damping_ratio = parse(line, &key, v)?,
            "calibration_samples" => q.gptq.calibration_samples = parse(line, &key, v)?,
            "act_order" => q.gptq.act_order = parse_bool(line, &key, v)?,
            _ => {
                return Err(PipelineError::ConfigSyntax {
                    line,
                    msg: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative dataset paths are resolved against the config's directory
        if let Some(dir) = path.parent() {
            for d in &mut cfg.datasets {
                for p in [&mut d.path, &mut d.test_path].into_iter().flatten() {
                    if p.is_relative() {
                        *p = dir.join(&*p);
                    }
                }
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    /// Referenced dataset files must exist.
    pub fn check_files(&self) -> Result<()> {
        for d in &self.datasets {
            for p in [&d.path, &d.test_path].into_iter().flatten() {
                if !p.is_file() {
                    return Err(PipelineError::Config(format!(
                        "dataset `{}`: file {} does not exist",
                        d.name,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stage1.train.seed = seed;
        self.stage3.train.seed = seed;
        self
    }

    /// Switches the quantization method, keeping explicit block settings.
    pub fn with_method(mut self, method: QuantMethod) -> Self {
        if method != self.quant.method {
            let gptq = self.quant.gptq;
            self.quant = QuantConfig::for_method(method);
            self.quant.gptq = gptq;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.vocab_size != Tokenizer::VOCAB_SIZE {
            return Err(PipelineError::Config(format!(
                "vocab_size must be {} for the character tokenizer",
                Tokenizer::VOCAB_SIZE
            )));
        }
        if self.limits.max_input_tokens == 0 || self.limits.max_output_tokens == 0 {
            return Err(PipelineError::Config("token limits must be > 0".into()));
        }
        if self.model.max_seq_len < self.limits.max_input_tokens + self.limits.max_output_tokens {
            return Err(PipelineError::Config(
                "model.max_seq_len must cover max_input_tokens + max_output_tokens".into(),
            ));
        }
        if self.datasets.is_empty() {
            return Err(PipelineError::Config("no datasets configured".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !names.insert(&d.name) {
                return Err(PipelineError::Config(format!(
                    "duplicate dataset `{}`",
                    d.name
                )));
            }
            if d.kind == DatasetKind::GeneralInstruction && (d.test > 0 || d.test_path.is_some()) {
                return Err(PipelineError::Config(format!(
                    "dataset `{}`: general instruction data has no test split",
                    d.name
                )));
            }
            d.params.validate()?;
        }
        for name in &self.stage3.datasets {
            if !names.contains(name) {
                return Err(PipelineError::Config(format!(
                    "stage3.data names unknown dataset `{name}`"
                )));
            }
        }
        if self.stage3.lora.rank == 0 || !(self.stage3.lora.alpha > 0.0) {
            return Err(PipelineError::Config(
                "stage3 rank and alpha must be positive".into(),
            ));
        }
        for tc in [&self.stage1.train, &self.stage3.train] {
            if tc.epochs == 0 || tc.batch_size == 0 || !(tc.lr >= 0.0) {
                return Err(PipelineError::Config(
                    "epochs and batch_size must be >= 1, lr >= 0".into(),
                ));
            }
        }
        self.quant.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Hash of everything stage 1 depends on; runs with equal values can share
    /// the stage-1 checkpoint.
    pub fn stage1_hash(&self) -> String {
        let key = (
            &self.seed,
            &self.model,
            &self.limits,
            &self.datasets,
            &self.stage1,
        );
        hex_digest(
            serde_json::to_string(&key)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
