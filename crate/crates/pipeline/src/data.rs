//! Synthetic task generators, JSON-lines IO and training mixtures.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ptqlora_core::eval::{EvalSample, TaskKind};
use ptqlora_core::model::{Example, GenerationLimits, Tokenizer};
use ptqlora_core::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// The seven call-purpose categories used by the synthetic classifier.
pub const CALL_PURPOSE_LABELS: [&str; 7] = [
    "Account Management",
    "Appointment",
    "Billing Questions",
    "Callback",
    "Cancellation",
    "Claim",
    "Complaint",
];

/// Two signature phrases per label, in label order.
const SIGNATURES: [[&str; 2]; 7] = [
    ["update my email", "reset my login"],
    ["book a visit", "move my slot"],
    ["my bill is high", "a double charge"],
    ["call me back", "ring me later"],
    ["cancel my plan", "end my service"],
    ["file a claim", "report damage"],
    ["rude agent", "very unhappy"],
];

const FILLER: [&str; 16] = [
    "hello", "hi", "um", "yes", "okay", "thanks", "so", "well", "today", "please", "sure", "right",
    "hmm", "uh", "good", "fine",
];

const NAMES: [&str; 8] = ["ann", "bob", "cara", "dev", "eli", "fay", "gus", "hal"];
const ITEMS: [&str; 6] = ["phone", "laptop", "router", "tv", "car", "bike"];
const ISSUES: [&str; 5] = ["broken", "late", "missing", "noisy", "slow"];
const ACTIONS: [&str; 4] = ["refund", "repair", "replace", "visit"];
const DAYS: [&str; 5] = ["monday", "tuesday", "wednesday", "thursday", "friday"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GeneralInstruction,
    SummarizationLike,
    ClassificationLike,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GeneralInstruction => "general_instruction",
            Self::SummarizationLike => "summarization_like",
            Self::ClassificationLike => "classification_like",
        }
    }

    /// Task name written into generated records.
    pub fn task_name(self) -> &'static str {
        match self {
            Self::GeneralInstruction => "general",
            Self::SummarizationLike => "summarization",
            Self::ClassificationLike => "classification",
        }
    }

    pub fn eval_kind(self) -> TaskKind {
        match self {
            Self::ClassificationLike => TaskKind::Classification,
            _ => TaskKind::Generation,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general_instruction" | "general" => Ok(Self::GeneralInstruction),
            "summarization_like" | "summarization" => Ok(Self::SummarizationLike),
            "classification_like" | "classification" => Ok(Self::ClassificationLike),
            _ => Err(PipelineError::Config(format!("unknown dataset kind `{s}`"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One JSON-lines record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub prompt: String,
    pub response: String,
    pub task: String,
}

impl Record {
    pub fn example(&self) -> Example {
        Tokenizer::encode_example(&self.prompt, &self.response)
    }

    pub fn eval_sample(&self, kind: TaskKind) -> EvalSample {
        EvalSample {
            task: self.task.clone(),
            kind,
            prompt: self.prompt.clone(),
            reference: self.response.clone(),
            prediction: None,
        }
    }

    /// Whether the prompt (with separator) and the response (with end marker)
    /// fit the token budgets.
    pub fn fits(&self, limits: &GenerationLimits) -> bool {
        Tokenizer::encode_prompt(&self.prompt).len() <= limits.max_input_tokens
            // the response needs one more slot for EOS
            && self.response.chars().count() < limits.max_output_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Classification: number of labels, taken from the front of the category list.
    pub labels: usize,
    /// Classification: filler words around the signature phrase.
    pub distractors: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            labels: CALL_PURPOSE_LABELS.len(),
            distractors: 4,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CALL_PURPOSE_LABELS.len()).contains(&self.labels) {
            return Err(PipelineError::Config(format!(
                "labels must be in 2..={}",
                CALL_PURPOSE_LABELS.len()
            )));
        }
        if self.distractors > 32 {
            return Err(PipelineError::Config("distractors must be <= 32".into()));
        }
        Ok(())
    }
}

pub fn classification_labels(params: &GeneratorParams) -> Vec<String> {
    CALL_PURPOSE_LABELS[..params.labels]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len() as u64) as usize]
}

fn random_word(rng: &mut Rng, min: usize, max: usize) -> String {
    let len = min + rng.below((max - min + 1) as u64) as usize;
    (0..len)
        .map(|_| (b'a' + rng.below(26) as u8) as char)
        .collect()
}

fn general(rng: &mut Rng) -> (String, String) {
    let text = random_word(rng, 3, 7);
    match rng.below(3) {
        0 => (format!("copy: {text}"), text),
        1 => (format!("reverse: {text}"), text.chars().rev().collect()),
        _ => (format!("upper: {text}"), text.to_uppercase()),
    }
}

fn summarization(rng: &mut Rng) -> (String, String) {
    let name = pick(rng, &NAMES);
    let item = pick(rng, &ITEMS);
    let issue = pick(rng, &ISSUES);
    let action = pick(rng, &ACTIONS);
    let day = pick(rng, &DAYS);
    let mut facts = vec![
        format!("name={name}"),
        format!("item={item}"),
        format!("issue={issue}"),
        format!("action={action}"),
        format!("day={day}"),
    ];
    rng.shuffle(&mut facts);
    let (length, summary) = match rng.below(3) {
        0 => ("short", format!("{name}: {item} {action}.")),
        1 => (
            "medium",
            format!("{name}'s {item} is {issue}. {action} on {day}."),
        ),
        _ => (
            "long",
            format!("{name} called, the {item} is {issue}. we agreed to {action} it. due {day}."),
        ),
    };
    (format!("summarize {length}: {}", facts.join("; ")), summary)
}

fn classification(rng: &mut Rng, label: usize, params: &GeneratorParams) -> (String, String) {
    let mut words: Vec<&str> = (0..params.distractors)
        .map(|_| pick(rng, &FILLER))
        .collect();
    let at = rng.below(words.len() as u64 + 1) as usize;
    words.insert(at, pick(rng, &SIGNATURES[label]));
    (
        format!("purpose: {}", words.join(" ")),
        CALL_PURPOSE_LABELS[label].to_string(),
    )
}

/// `n` records of one synthetic task, a pure function of `(kind, n, params, seed)`.
///
/// Classification labels cycle through the label set before shuffling, so
/// label counts differ by at most one.
pub fn generate_synthetic(
    kind: DatasetKind,
    n: usize,
    params: &GeneratorParams,
    seed: u64,
) -> Result<Vec<Record>> {
    params.validate()?;
    let mut rng = Rng::new(seed, kind as u64 + 1000);
    let mut out: Vec<Record> = (0..n)
        .map(|i| {
            let (prompt, response) = match kind {
                DatasetKind::GeneralInstruction => general(&mut rng),
                DatasetKind::SummarizationLike => summarization(&mut rng),
                DatasetKind::ClassificationLike => {
                    classification(&mut rng, i % params.labels, params)
                }
            };
            Record {
                prompt,
                response,
                task: kind.task_name().into(),
            }
        })
        .collect();
    rng.shuffle(&mut out);
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    f.write_all(&buf).map_err(|e| PipelineError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedDataset {
    pub records: Vec<Record>,
    /// Records dropped for exceeding the token budgets.
    pub dropped: usize,
}

/// Reads a JSON-lines dataset and drops records over the token budgets.
///
/// Blank lines are skipped. A line that is not JSON, or an object without
/// string fields `prompt`, `response` and `task`, is reported with its
/// 1-based line number.
pub fn load_dataset_jsonl(path: &Path, limits: &GenerationLimits) -> Result<LoadedDataset> {
    let f = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = LoadedDataset::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        let err = |msg: String| PipelineError::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let field = |k: &str| -> Result<String> {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| err(format!("missing string field `{k}`")))
        };
        let r = Record {
            prompt: field("prompt")?,
            response: field("response")?,
            task: field("task")?,
        };
        if r.fits(limits) {
            out.records.push(r);
        } else {
            out.dropped += 1;
        }
    }
    Ok(out)
}

/// Training mixture of several datasets.
///
/// Without weights every record is used once. With weights, dataset `i`
/// contributes `round(N·wᵢ/Σw)` records (N = total size), drawn cyclically from
/// a seeded permutation of its records.
pub fn build_mixture(parts: &[(&[Record], Option<f64>)], seed: u64) -> Result<Vec<Record>> {
    let total: usize = parts.iter().map(|(r, _)| r.len()).sum();
    let weighted = parts.iter().any(|(_, w)| w.is_some());
    let wsum: f64 = parts.iter().map(|(r, w)| w.unwrap_or(r.len() as f64)).sum();
    let mut out = Vec::new();
    for (i, (records, w)) in parts.iter().enumerate() {
        if records.is_empty() {
            continue;
        }
        let take = if weighted {
            let w = w.unwrap_or(records.len() as f64);
            if !(w >= 0.0) || !w.is_finite() {
                return Err(PipelineError::Config("mixture weights must be >= 0".into()));
            }
            (total as f64 * w / wsum).round() as usize
        } else {
            records.len()
        };
        let perm = Rng::new(seed, 500 + i as u64).permutation(records.len());
        out.extend((0..take).map(|k| records[perm[k % records.len()]].clone()));
    }
    if out.is_empty() {
        return Err(ptqlora_core::Error::EmptyDataset.into());
    }
    Ok(out)
}
