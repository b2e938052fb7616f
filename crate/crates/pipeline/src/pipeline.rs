//! Three-stage orchestration: SFT, 4-bit PTQ, then QLoRA on the same data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ptqlora_core::adapter::{init_lora, train_qlora, QLoraModel};
use ptqlora_core::eval::{evaluate_stage, EvalSample, MetricReport, TaskKind};
use ptqlora_core::model::{train_sft, Example, Parameters, TrainLog, Weights};
use ptqlora_core::quant::{collect_calibration, quantize_model, QuantizedModel};
use ptqlora_core::{QuantMethod, Rng, StageLabel};

use crate::checkpoint::Checkpoint;
use crate::config::hex_digest;
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{
    build_mixture, classification_labels, generate_synthetic, load_dataset_jsonl, write_jsonl,
    DatasetKind, Record,
};
use crate::error::{PipelineError, Result};
use crate::manifest::{RunManifest, StageRecord, MANIFEST_FILE};

// Rng streams, one per independent consumer of the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_LORA: u64 = 9;
const STREAM_CALIBRATION: u64 = 77;

pub const STAGE1_FILE: &str = "stage1-sft.pqlr";
pub const STAGE2_FILE: &str = "stage2-ptq.pqlr";
pub const STAGE3_FILE: &str = "stage3-qlora.pqlr";

/// Train and test records of every configured dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: BTreeMap<String, Vec<Record>>,
    pub test: BTreeMap<String, Vec<Record>>,
    pub dropped: usize,
    pub stage1_mixture: Vec<Record>,
    pub stage3_mixture: Vec<Record>,
    pub eval_samples: Vec<EvalSample>,
    pub label_sets: BTreeMap<String, Vec<String>>,
}

fn split_seed(run_seed: u64, dataset: usize, split: u64) -> u64 {
    run_seed
        .wrapping_mul(1_000_003)
        .wrapping_add(dataset as u64 * 16 + split)
}

fn load_or_generate(
    cfg: &ExperimentConfig,
    idx: usize,
    d: &DatasetSpec,
    path: Option<&Path>,
    n: usize,
    split: u64,
) -> Result<(Vec<Record>, usize)> {
    match path {
        Some(p) => {
            let loaded = load_dataset_jsonl(p, &cfg.limits)?;
            let mut recs = loaded.records;
            // a size of 0 means "everything in the file"
            if n > 0 {
                recs.truncate(n);
            }
            Ok((recs, loaded.dropped))
        }
        None => {
            let recs = generate_synthetic(d.kind, n, &d.params, split_seed(cfg.seed, idx, split))?;
            let before = recs.len();
            let kept: Vec<Record> = recs.into_iter().filter(|r| r.fits(&cfg.limits)).collect();
            let dropped = before - kept.len();
            Ok((kept, dropped))
        }
    }
}

pub fn records_hash(records: &[Record]) -> String {
    let mut bytes = Vec::new();
    for r in records {
        bytes.extend(serde_json::to_vec(r).expect("record serializes"));
        bytes.push(b'\n');
    }
    hex_digest(&bytes)
}

fn mixture(
    cfg: &ExperimentConfig,
    train: &BTreeMap<String, Vec<Record>>,
    names: &[String],
) -> Result<Vec<Record>> {
    let parts: Vec<(&[Record], Option<f64>)> = cfg
        .datasets
        .iter()
        .filter(|d| names.is_empty() || names.contains(&d.name))
        .map(|d| (train[&d.name].as_slice(), d.weight))
        .filter(|(r, _)| !r.is_empty())
        .collect();
    if parts.is_empty() {
        return Err(PipelineError::Config("training mixture is empty".into()));
    }
    build_mixture(&parts, cfg.seed)
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    let mut label_sets = BTreeMap::new();
    let mut eval_samples = Vec::new();
    let mut dropped = 0;
    for (i, d) in cfg.datasets.iter().enumerate() {
        let (tr, n) = load_or_generate(cfg, i, d, d.path.as_deref(), d.train, 0)?;
        dropped += n;
        let te = if d.kind == DatasetKind::GeneralInstruction {
            Vec::new()
        } else if d.test_path.is_some() || d.test > 0 {
            let (te, n) = load_or_generate(cfg, i, d, d.test_path.as_deref(), d.test, 2)?;
            dropped += n;
            te
        } else {
            Vec::new()
        };
        if d.kind == DatasetKind::ClassificationLike && !te.is_empty() {
            let labels = if d.path.is_none() {
                classification_labels(&d.params)
            } else {
                let mut l: Vec<String> = tr.iter().chain(&te).map(|r| r.response.clone()).collect();
                l.sort();
                l.dedup();
                l
            };
            for r in &te {
                label_sets
                    .entry(r.task.clone())
                    .or_insert_with(|| labels.clone());
            }
        }
        let kind: TaskKind = d.kind.eval_kind();
        eval_samples.extend(te.iter().map(|r| r.eval_sample(kind)));
        train.insert(d.name.clone(), tr);
        test.insert(d.name.clone(), te);
    }
    let stage1_mixture = mixture(cfg, &train, &[])?;
    let stage3_mixture = if cfg.stage3.datasets.is_empty() {
        stage1_mixture.clone()
    } else {
        mixture(cfg, &train, &cfg.stage3.datasets)?
    };
    if eval_samples.is_empty() {
        return Err(PipelineError::Config("no test samples to evaluate".into()));
    }
    Ok(PreparedData {
        train,
        test,
        dropped,
        stage1_mixture,
        stage3_mixture,
        eval_samples,
        label_sets,
    })
}

/// Writes `<name>-train.jsonl` and `<name>-test.jsonl` per dataset.
pub fn write_datasets(data: &PreparedData, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut out = Vec::new();
    for (split, sets) in [("train", &data.train), ("test", &data.test)] {
        for (name, recs) in sets {
            if recs.is_empty() {
                continue;
            }
            let p = dir.join(format!("{name}-{split}.jsonl"));
            write_jsonl(&p, recs)?;
            out.push(p);
        }
    }
    Ok(out)
}

fn examples(records: &[Record]) -> Vec<Example> {
    records.iter().map(Record::example).collect()
}

fn half_roundtrip(p: Parameters<f32>) -> Parameters<f32> {
    let mut map = p.into_map();
    for t in map.values_mut() {
        for v in t.data_mut() {
            *v = half::f16::from_f32(*v).to_f32();
        }
    }
    Parameters::from_map(map)
}

pub fn run_stage1(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(Parameters<f32>, TrainLog)> {
    let init = Parameters::init(&cfg.model, &mut Rng::new(cfg.seed, STREAM_INIT))?;
    let (p, log) = train_sft(
        init,
        &cfg.model,
        &examples(&data.stage1_mixture),
        &cfg.stage1.train,
    )?;
    let p = if cfg.stage1.half_precision {
        half_roundtrip(p)
    } else {
        p
    };
    Ok((p, log))
}

/// Calibration sequences: a seeded sample of the stage-1 mixture.
pub fn calibration_sequences(cfg: &ExperimentConfig, data: &PreparedData) -> Vec<Vec<usize>> {
    let mix = &data.stage1_mixture;
    let perm = Rng::new(cfg.seed, STREAM_CALIBRATION).permutation(mix.len());
    perm.iter()
        .take(cfg.quant.gptq.calibration_samples)
        .map(|&i| {
            let mut t = mix[i].example().tokens;
            t.truncate(cfg.model.max_seq_len);
            t
        })
        .collect()
}

pub fn run_stage2(
    cfg: &ExperimentConfig,
    params: &Parameters<f32>,
    data: &PreparedData,
) -> Result<(QuantizedModel, Option<String>)> {
    let (cal, hash) = match cfg.quant.method {
        QuantMethod::BnbNf4 => (None, None),
        QuantMethod::Gptq => {
            let seqs = calibration_sequences(cfg, data);
            let flat: Vec<u8> = seqs
                .iter()
                .flatten()
                .flat_map(|&t| (t as u32).to_le_bytes())
                .collect();
            let cal = collect_calibration(params, &cfg.model, &seqs)?;
            (Some(cal), Some(hex_digest(&flat)))
        }
    };
    Ok((
        quantize_model(params, &cfg.model, &cfg.quant, cal.as_ref())?,
        hash,
    ))
}

pub fn run_stage3(
    cfg: &ExperimentConfig,
    base: QuantizedModel,
    data: &PreparedData,
) -> Result<(QLoraModel<QuantizedModel>, TrainLog)> {
    let lc = &cfg.stage3.lora;
    let adapters = init_lora::<f32>(
        &cfg.model,
        &lc.resolved_targets(&cfg.model),
        lc.rank,
        lc.alpha,
        &mut Rng::new(cfg.seed, STREAM_LORA),
    )?;
    let mut m = QLoraModel::new(base, adapters)?;
    let log = train_qlora(
        &mut m,
        &cfg.model,
        &examples(&data.stage3_mixture),
        &cfg.stage3.train,
    )?;
    Ok((m, log))
}

pub fn evaluate<W: Weights<f32> + ?Sized>(
    cfg: &ExperimentConfig,
    w: &W,
    stage: StageLabel,
    data: &PreparedData,
) -> Result<(MetricReport, Vec<EvalSample>)> {
    Ok(evaluate_stage(
        w,
        &cfg.model,
        stage,
        &data.eval_samples,
        &data.label_sets,
        &cfg.limits,
    )?)
}

fn predictions_file(stage: StageLabel) -> String {
    format!("predictions-{}.jsonl", stage.stage_number())
}

fn write_predictions(dir: &Path, stage: StageLabel, preds: &[EvalSample]) -> Result<()> {
    let p = dir.join(predictions_file(stage));
    let mut text = String::new();
    for s in preds {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    std::fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))
}

fn save_checkpoint(dir: &Path, file: &str, ck: &Checkpoint) -> Result<String> {
    let bytes = ck.to_bytes()?;
    let p = dir.join(file);
    std::fs::write(&p, &bytes).map_err(|e| PipelineError::io(&p, e))?;
    Ok(hex_digest(&bytes))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory of stage-1 results keyed by everything stage 1 depends on,
    /// so runs differing only in later stages train the SFT model once.
    pub stage1_cache: Option<PathBuf>,
    /// Stop after this many stages.
    pub stop_after: Option<usize>,
    /// Print stage progress to stderr.
    pub verbose: bool,
}

/// Runs (or resumes) every stage, checkpointing and updating the manifest
/// in `dir` after each one.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &Path, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let hash = cfg.hash();
    let stage1_hash = cfg.stage1_hash();
    let mut manifest = match RunManifest::load(&dir.join(MANIFEST_FILE)) {
        Ok(m) if m.config_hash == hash => m,
        // only stage 1 done and it is still valid: later settings may change
        Ok(mut m) if m.stages.len() <= 1 && m.stage1_hash == stage1_hash => {
            m.config_hash = hash;
            m.method = cfg.quant.method;
            m
        }
        Ok(_) => {
            return Err(PipelineError::Manifest(format!(
                "{} holds a run with a different config",
                dir.display()
            )))
        }
        Err(PipelineError::Io { .. }) => {
            RunManifest::new(hash, stage1_hash, cfg.seed, cfg.quant.method)
        }
        Err(e) => return Err(e),
    };
    let data = prepare_data(cfg)?;
    manifest.dropped_records = data.dropped;
    let stop = opts.stop_after.unwrap_or(3).min(3);
    let log = |msg: &str| {
        if opts.verbose {
            eprintln!("[seed {} {}] {msg}", cfg.seed, cfg.quant.method);
        }
    };

    // Stage 1
    let params = if let Some(rec) = manifest.stage(StageLabel::Sft16Bit) {
        log("stage 1 already complete");
        Checkpoint::load(&dir.join(&rec.checkpoint))?.into_params()?
    } else {
        let cached = opts
            .stage1_cache
            .as_ref()
            .map(|c| c.join(format!("sft-{}", &cfg.stage1_hash()[..16])));
        let from_cache = cached.as_ref().filter(|c| c.join("record.json").is_file());
        let (params, rec) = if let Some(c) = from_cache {
            log("stage 1 loaded from cache");
            let text = std::fs::read_to_string(c.join("record.json"))
                .map_err(|e| PipelineError::io(c.join("record.json"), e))?;
            let rec: StageRecord = serde_json::from_str(&text)?;
            let src = c.join(STAGE1_FILE);
            std::fs::copy(&src, dir.join(STAGE1_FILE)).map_err(|e| PipelineError::io(&src, e))?;
            (
                Checkpoint::load(&dir.join(STAGE1_FILE))?.into_params()?,
                rec,
            )
        } else {
            log("stage 1: supervised fine-tuning");
            let t = Instant::now();
            let (params, tlog) = run_stage1(cfg, &data)?;
            let (metrics, preds) = evaluate(cfg, &params, StageLabel::Sft16Bit, &data)?;
            write_predictions(dir, StageLabel::Sft16Bit, &preds)?;
            let ck = Checkpoint::from_params(StageLabel::Sft16Bit, &cfg.model, &params);
            let sha = save_checkpoint(dir, STAGE1_FILE, &ck)?;
            let rec = StageRecord {
                label: StageLabel::Sft16Bit,
                checkpoint: STAGE1_FILE.into(),
                checkpoint_sha256: sha,
                dataset_hash: Some(records_hash(&data.stage1_mixture)),
                epoch_losses: tlog.epoch_mean_losses(),
                bits_per_weight: None,
                metrics,
                wall_clock_secs: t.elapsed().as_secs_f64(),
            };
            if let Some(c) = &cached {
                std::fs::create_dir_all(c).map_err(|e| PipelineError::io(c, e))?;
                std::fs::copy(dir.join(STAGE1_FILE), c.join(STAGE1_FILE))
                    .map_err(|e| PipelineError::io(c, e))?;
                std::fs::write(c.join("record.json"), serde_json::to_string_pretty(&rec)?)
                    .map_err(|e| PipelineError::io(c, e))?;
            }
            (params, rec)
        };
        manifest.push(rec)?;
        manifest.save(dir)?;
        params
    };
    if stop < 2 {
        return Ok(manifest);
    }

    // Stage 2
    let ptq = StageLabel::Ptq(cfg.quant.method);
    let qm = if let Some(rec) = manifest.stage(ptq) {
        log("stage 2 already complete");
        Checkpoint::load(&dir.join(&rec.checkpoint))?.into_quantized()?
    } else {
        log("stage 2: 4-bit quantization");
        let t = Instant::now();
        let (qm, cal_hash) = run_stage2(cfg, &params, &data)?;
        let (metrics, preds) = evaluate(cfg, &qm, ptq, &data)?;
        write_predictions(dir, ptq, &preds)?;
        let sha = save_checkpoint(
            dir,
            STAGE2_FILE,
            &Checkpoint::from_quantized(&cfg.model, &qm),
        )?;
        manifest.push(StageRecord {
            label: ptq,
            checkpoint: STAGE2_FILE.into(),
            checkpoint_sha256: sha,
            dataset_hash: cal_hash,
            epoch_losses: Vec::new(),
            bits_per_weight: Some(qm.bits_per_weight()),
            metrics,
            wall_clock_secs: t.elapsed().as_secs_f64(),
        })?;
        manifest.save(dir)?;
        qm
    };
    if stop < 3 || manifest.is_complete() {
        return Ok(manifest);
    }

    // Stage 3
    log("stage 3: adapter fine-tuning on the quantized base");
    let t = Instant::now();
    let label = StageLabel::PtqQlora(cfg.quant.method);
    let bpw = qm.bits_per_weight();
    let (m, tlog) = run_stage3(cfg, qm, &data)?;
    let (metrics, preds) = evaluate(cfg, &m, label, &data)?;
    write_predictions(dir, label, &preds)?;
    let sha = save_checkpoint(dir, STAGE3_FILE, &Checkpoint::from_qlora(&cfg.model, &m))?;
    manifest.push(StageRecord {
        label,
        checkpoint: STAGE3_FILE.into(),
        checkpoint_sha256: sha,
        dataset_hash: Some(records_hash(&data.stage3_mixture)),
        epoch_losses: tlog.epoch_mean_losses(),
        bits_per_weight: Some(bpw),
        metrics,
        wall_clock_secs: t.elapsed().as_secs_f64(),
    })?;
    manifest.save(dir)?;
    log("done");
    Ok(manifest)
}

/// Directory of one run inside a suite.
pub fn run_dir(root: &Path, method: QuantMethod, seed: u64) -> PathBuf {
    root.join(method.as_str()).join(format!("seed-{seed}"))
}

/// Every (method, seed) run under `root`, sharing stage 1 between methods.
pub fn run_suite(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    methods: &[QuantMethod],
    root: &Path,
    verbose: bool,
) -> Result<Vec<RunManifest>> {
    let opts = RunOptions {
        stage1_cache: Some(root.join("stage1-cache")),
        stop_after: None,
        verbose,
    };
    let mut out = Vec::new();
    for &seed in seeds {
        for &method in methods {
            let mut c = cfg.clone().with_seed(seed);
            c = c.with_method(method);
            out.push(run_pipeline(&c, &run_dir(root, method, seed), &opts)?);
        }
    }
    Ok(out)
}
