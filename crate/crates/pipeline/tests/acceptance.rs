// Acceptance suite: one PASS/FAIL line per criterion.
//
// Runs without the libtest harness so the verdicts are printed by plain
// `cargo test`. Pass criterion numbers to run a subset:
//   cargo test -p ptqlora --test acceptance -- 6 7

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ptqlora::checkpoint::Checkpoint;
use ptqlora::compare::{compare_stages, CompareSpec};
use ptqlora::config::ExperimentConfig;
use ptqlora::error::PipelineError;
use ptqlora::manifest::RunManifest;
use ptqlora::pipeline::{
    run_pipeline, run_suite, RunOptions, STAGE1_FILE, STAGE2_FILE, STAGE3_FILE,
};
use ptqlora_core::adapter::{init_lora, QLoraModel};
use ptqlora_core::eval::{rouge_scores, wilcoxon_signed_rank, WilcoxonMode};
use ptqlora_core::model::params::projection_weights;
use ptqlora_core::model::{batch_loss, loss_and_grads, Example, ModelConfig, Parameters};
use ptqlora_core::quant::*;
use ptqlora_core::{QuantMethod, Rng, StageLabel, Tensor};
use statrs::distribution::{ContinuousCDF, Normal};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit_secs: u64) -> Verdict {
    ensure!(
        elapsed.as_secs_f64() < limit_secs as f64,
        "took {:.1}s, limit {limit_secs}s",
        elapsed.as_secs_f64()
    );
    Ok(String::new())
}

// 1 ------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn fd_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 9,
        tie_embeddings: false,
        init_std: 0.3,
        ln_eps: 1e-5,
    }
}

fn fd_batch(cfg: &ModelConfig) -> Vec<Example> {
    let mut rng = Rng::new(5, 3);
    (0..3)
        .map(|i| Example {
            tokens: (0..7)
                .map(|_| rng.below(cfg.vocab_size as u64) as usize)
                .collect(),
            prompt_len: 1 + i,
        })
        .collect()
}

/// Relative error with the denominator floored at 1e-3 of the tensor's
/// largest gradient and at 1e-6. Key biases have an exactly zero gradient
/// (softmax ignores a constant shift), where both sides are round-off near
/// 1e-11 and a purely relative measure would be meaningless.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-6))
        .fold(0.0, f64::max)
}

fn central_diff(t: &mut Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..t.len())
        .map(|i| {
            let x = t.data()[i];
            t.data_mut()[i] = x + FD_STEP;
            let up = loss(t);
            t.data_mut()[i] = x - FD_STEP;
            let down = loss(t);
            t.data_mut()[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn adapter_side<'a>(
    m: &'a mut QLoraModel<Parameters<f64>, f64>,
    name: &str,
    side: &str,
) -> &'a mut Tensor<f64> {
    let ad = m.adapters.get_mut(name).unwrap();
    if side == "lora_a" {
        &mut ad.a
    } else {
        &mut ad.b
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let cfg = fd_config();
    let batch = fd_batch(&cfg);
    let mut params: Parameters<f64> =
        Parameters::init(&cfg, &mut Rng::new(8, 0)).map_err(|e| e.to_string())?;
    // move norms and biases off their init values so every path carries signal
    let mut rng = Rng::new(8, 1);
    for t in params.as_map_mut().values_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v += rng.normal(0.0, 0.2);
            }
        }
    }

    let (_, grads) = loss_and_grads(&params, &cfg, &batch).map_err(|e| e.to_string())?;
    ensure!(
        grads.len() == params.len(),
        "{} of {} tensors have gradients",
        grads.len(),
        params.len()
    );
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let mut p = params.clone();
        let mut t = p.get(name).unwrap().clone();
        let numeric = central_diff(&mut t, |t| {
            p.insert(name.clone(), t.clone());
            batch_loss(&p, &cfg, &batch).unwrap()
        });
        let e = rel_err(grads[name].data(), &numeric);
        checked += numeric.len();
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }

    let targets = projection_weights(&cfg);
    let mut ads =
        init_lora::<f64>(&cfg, &targets, 2, 4.0, &mut Rng::new(8, 2)).map_err(|e| e.to_string())?;
    for ad in ads.values_mut() {
        for v in ad.b.data_mut() {
            *v = rng.normal(0.0, 0.3);
        }
    }
    let mut m = QLoraModel::new(params, ads).map_err(|e| e.to_string())?;
    let (_, agrads) = loss_and_grads(&m, &cfg, &batch).map_err(|e| e.to_string())?;
    ensure!(
        agrads.len() == 2 * targets.len(),
        "{} adapter gradients for {} targets",
        agrads.len(),
        targets.len()
    );
    for name in &targets {
        for side in ["lora_a", "lora_b"] {
            let mut t = adapter_side(&mut m, name, side).clone();
            let numeric = central_diff(&mut t, |t| {
                *adapter_side(&mut m, name, side) = t.clone();
                batch_loss(&m, &cfg, &batch).unwrap()
            });
            *adapter_side(&mut m, name, side) = t;
            let key = format!("{name}.{side}");
            let e = rel_err(agrads[&key].data(), &numeric);
            checked += numeric.len();
            if e > worst.0 {
                worst = (e, key);
            }
        }
    }
    ensure!(
        worst.0 < FD_TOL,
        "{}: relative error {:.2e} >= {FD_TOL:e}",
        worst.1,
        worst.0
    );
    within(start.elapsed(), 60)?;
    Ok(format!(
        "{checked} entries, worst {:.2e} ({})",
        worst.0, worst.1
    ))
}

// 2 ------------------------------------------------------------------------

fn quantization_bound() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(2, 0);
    let mut checked = 0usize;
    let mut tightest = 0.0f64;
    for case in 0..50 {
        let rows = 1 + rng.below(12) as usize;
        let cols = 1 + rng.below(96) as usize;
        let std = 0.01 + 3.0 * rng.uniform();
        let w: Tensor<f32> = rng.normal_tensor(&[rows, cols], 0.0, std);
        for id in [CodebookId::Nf4, CodebookId::Uniform4] {
            let cb = Codebook::build(id);
            let gap = cb
                .values
                .windows(2)
                .map(|p| (p[1] - p[0]) as f64)
                .fold(0.0, f64::max);
            for block in [16usize, 64] {
                let q = quantize_blockwise(&w, block, &cb, None).map_err(|e| e.to_string())?;
                let dq = dequantize_blockwise(&q).map_err(|e| e.to_string())?;
                for (b, (orig, rec)) in w
                    .data()
                    .chunks(block)
                    .zip(dq.data().chunks(block))
                    .enumerate()
                {
                    let absmax = orig.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
                    // one f32 rounding in the product and one in the difference
                    let bound = absmax * gap / 2.0 + 2.0 * f32::EPSILON as f64 * absmax;
                    for (x, y) in orig.iter().zip(rec) {
                        let err = (*x as f64 - *y as f64).abs();
                        ensure!(
                            err <= bound,
                            "case {case} {id:?} block {block} #{b}: error {err} > {bound}"
                        );
                        if bound > 0.0 {
                            tightest = tightest.max(err / bound);
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    within(start.elapsed(), 10)?;
    Ok(format!("{checked} elements, max error/bound {tightest:.3}"))
}

// 3 ------------------------------------------------------------------------

fn nf4_codebook() -> Verdict {
    // Asymmetric construction: 8 positive quantiles, 7 negative, and zero.
    let n = Normal::new(0.0, 1.0).unwrap();
    let delta = 0.5 * (1.0 / 32.0 + 1.0 / 30.0);
    let grid = |k: usize| -> Vec<f64> {
        (1..k)
            .map(|i| 0.5 + (0.5 - delta) * i as f64 / (k - 1) as f64)
            .collect()
    };
    let mut oracle: Vec<f64> = grid(9).into_iter().map(|p| n.inverse_cdf(p)).collect();
    oracle.extend(grid(8).into_iter().map(|p| -n.inverse_cdf(p)));
    oracle.push(0.0);
    let top = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut oracle: Vec<f64> = oracle.iter().map(|v| v / top).collect();
    oracle.sort_by(f64::total_cmp);

    let v = Codebook::build(CodebookId::Nf4).values;
    ensure!(v.len() == 16, "{} levels", v.len());
    ensure!(
        v.windows(2).all(|p| p[0] < p[1]),
        "levels not strictly increasing"
    );
    ensure!(v[0] == -1.0 && v[15] == 1.0, "endpoints {} {}", v[0], v[15]);
    ensure!(v.contains(&0.0), "zero missing");
    let dev = v
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    ensure!(dev <= 1e-6, "max deviation from quantile oracle {dev:e}");
    Ok(format!("max deviation from statrs quantiles {dev:.1e}"))
}

// 4 ------------------------------------------------------------------------

/// `‖(W − Ŵ)X‖²` for one row, evaluated directly.
fn row_loss(w: &[f32], wh: &[f32], x: &Tensor<f32>) -> f64 {
    (0..x.cols())
        .map(|s| {
            let e: f64 = (0..w.len())
                .map(|c| (w[c] as f64 - wh[c] as f64) * x.at(c, s) as f64)
                .sum();
            e * e
        })
        .sum()
}

fn gptq_sandwich() -> Verdict {
    let start = Instant::now();
    let levels = Codebook::build(CodebookId::Nf4).values;
    // four columns keep the 16^4 search per row cheap; calibration is 8x wider
    let (rows, cols, samples) = (2usize, 4usize, 32usize);
    let mut rng = Rng::new(0, 0);
    let mut wins = 0;
    for case in 0..100 {
        let w: Tensor<f32> = rng.normal_tensor(&[rows, cols], 0.0, 1.0);
        let x: Tensor<f32> = rng.normal_tensor(&[cols, samples], 0.0, 1.0);
        let scales: Vec<f32> = (0..rows * cols)
            .map(|i| {
                let r = i / cols;
                w.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .fold(0.0f32, |m, v| m.max(v.abs()))
            })
            .collect();
        let loss = |codes: &[u8]| -> f64 {
            let wh = reconstruct(&[rows, cols], codes, &scales, &levels).unwrap();
            proxy_loss(&w, &wh, &x).unwrap()
        };
        let g =
            loss(&gptq_codes(&w, &x, &scales, &levels, 0.01, false).map_err(|e| e.to_string())?);
        let r = loss(&rtn_codes(&w, &scales, &levels));

        let mut best = 0.0;
        for row in 0..rows {
            let wr = &w.data()[row * cols..(row + 1) * cols];
            let s = scales[row * cols];
            let mut row_best = f64::INFINITY;
            for combo in 0..16usize.pow(cols as u32) {
                let wh: Vec<f32> = (0..cols)
                    .map(|c| s * levels[(combo >> (4 * c)) & 15])
                    .collect();
                row_best = row_best.min(row_loss(wr, &wh, &x));
            }
            best += row_best;
        }
        ensure!(
            best <= g * (1.0 + 1e-9) + 1e-12,
            "case {case}: optimum {best} above gptq {g}"
        );
        if g <= r {
            wins += 1;
        }
    }
    ensure!(wins >= 95, "gptq <= rtn in {wins}/100");

    // diagonal Hessian: orthogonal calibration rows
    let cb = Codebook::build(CodebookId::Nf4);
    for seed in 0..10 {
        let mut rng = Rng::new(40 + seed, 0);
        let w: Tensor<f32> = rng.normal_tensor(&[6, 8], 0.0, 1.0);
        let mut x = Tensor::<f32>::zeros(&[8, 12]);
        for c in 0..8 {
            x.set(
                c,
                (c + seed as usize) % 12,
                0.2 + 3.0 * rng.uniform() as f32,
            );
        }
        let cfg = GptqConfig {
            block_size: 16,
            ..Default::default()
        };
        let g = gptq_quantize_matrix(&w, &x, &cfg, &cb).map_err(|e| e.to_string())?;
        let r = quantize_blockwise(&w, 16, &cb, None).map_err(|e| e.to_string())?;
        ensure!(
            g == r,
            "diagonal Hessian seed {seed}: gptq differs from rtn"
        );
    }
    within(start.elapsed(), 120)?;
    Ok(format!(
        "optimum <= gptq in 100/100, gptq <= rtn in {wins}/100, diagonal H equal in 10/10"
    ))
}

// 5 ------------------------------------------------------------------------

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SFT_MARGIN: f64 = 0.02;

fn f1(m: &RunManifest, label: StageLabel) -> f64 {
    m.stage(label)
        .unwrap()
        .metrics
        .task("classification")
        .unwrap()
        .f1_micro
        .unwrap()
}

fn behavioral_reproduction() -> Verdict {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    let cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    ensure!(
        cfg.datasets.iter().any(|d| d.params.labels == 7),
        "desk config lacks a 7-label task"
    );
    let root = tempfile::tempdir().unwrap();
    let methods = [QuantMethod::BnbNf4, QuantMethod::Gptq];
    let runs = run_suite(&cfg, &SEEDS, &methods, root.path(), false).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for method in methods {
        let ms: Vec<&RunManifest> = runs.iter().filter(|m| m.method == method).collect();
        let sft: Vec<f64> = ms.iter().map(|m| f1(m, StageLabel::Sft16Bit)).collect();
        let ptq: Vec<f64> = ms.iter().map(|m| f1(m, StageLabel::Ptq(method))).collect();
        let qlora: Vec<f64> = ms
            .iter()
            .map(|m| f1(m, StageLabel::PtqQlora(method)))
            .collect();
        let wins = qlora.iter().zip(&ptq).filter(|(q, p)| q >= p).count();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ms_, mq) = (mean(&sft), mean(&qlora));
        lines.push(format!(
            "{method}: qlora>=ptq {wins}/5, mean F1 sft {ms_:.3} ptq {:.3} qlora {mq:.3}",
            mean(&ptq)
        ));
        if wins < 4 {
            failures.push(format!("{method}: qlora >= ptq only in {wins}/5 seeds"));
        }
        if mq < ms_ - SFT_MARGIN {
            failures.push(format!(
                "{method}: mean qlora {mq:.3} < mean sft {ms_:.3} - {SFT_MARGIN}"
            ));
        }
    }
    ensure!(
        failures.is_empty(),
        "{} [{}]",
        failures.join("; "),
        lines.join("; ")
    );
    within(start.elapsed(), 30 * 60)?;
    Ok(format!(
        "{} in {:.0}s",
        lines.join("; "),
        start.elapsed().as_secs_f64()
    ))
}

// 6 ------------------------------------------------------------------------

fn rouge_golden() -> Verdict {
    let s = rouge_scores("the cat sat", "the cat ran");
    ensure!(s.r1 == 2.0 / 3.0, "R1 {}", s.r1);
    ensure!(s.r2 == 0.5, "R2 {}", s.r2);
    ensure!(s.rl == 2.0 / 3.0, "RL {}", s.rl);
    let same = rouge_scores("the cat sat on the mat", "the cat sat on the mat");
    ensure!(
        [same.r1, same.r2, same.rl, same.rlsum] == [1.0; 4],
        "identity {same:?}"
    );
    let disjoint = rouge_scores("alpha beta gamma", "delta epsilon");
    ensure!(
        [disjoint.r1, disjoint.r2, disjoint.rl, disjoint.rlsum] == [0.0; 4],
        "disjoint {disjoint:?}"
    );
    Ok("R1 2/3, R2 1/2, RL 2/3, identity 1, disjoint 0".into())
}

// 7 ------------------------------------------------------------------------

/// Two-sided exact p by enumerating all 2^n sign vectors over doubled ranks.
fn enumerate_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nz[a].abs().total_cmp(&nz[b].abs()));
    let mut rank2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[order[j + 1]].abs() == nz[order[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            rank2[order[k]] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    let observed: u64 = (0..n).filter(|&k| nz[k] > 0.0).map(|k| rank2[k]).sum();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u32..1 << n {
        let w: u64 = (0..n)
            .filter(|k| mask >> k & 1 == 1)
            .map(|k| rank2[k])
            .sum();
        lo += (w <= observed) as u64;
        hi += (w >= observed) as u64;
    }
    (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
}

fn wilcoxon_exact() -> Verdict {
    let mut rng = Rng::new(7, 0);
    let mut compared = 0;
    for case in 0..50 {
        let n = 1 + rng.below(12) as usize;
        let d: Vec<f64> = (0..n)
            .map(|_| (rng.normal(0.2, 1.0) * 3.0).round() / 3.0)
            .collect();
        let r = wilcoxon_signed_rank(&d, WilcoxonMode::Exact).map_err(|e| e.to_string())?;
        let expected = if r.degenerate { 1.0 } else { enumerate_p(&d) };
        ensure!(
            (r.p_value - expected).abs() <= 4.0 * f64::EPSILON,
            "case {case} {d:?}: p {} vs enumeration {expected}",
            r.p_value
        );
        compared += 1;
    }
    let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], WilcoxonMode::Auto)
        .map_err(|e| e.to_string())?;
    ensure!(r.p_value == 0.0625, "all-positive n=5 gives {}", r.p_value);
    Ok(format!(
        "{compared} instances equal enumeration, n=5 all positive p = 0.0625"
    ))
}

// 8 ------------------------------------------------------------------------

fn reference_statistics() -> Verdict {
    let spec = CompareSpec {
        stage_a: "PTQ-*-4bit+QLoRA".into(),
        stage_b: "PTQ-*-4bit".into(),
        metric: "F1-micro".into(),
        task: None,
        mode: WilcoxonMode::Auto,
    };
    let c = compare_stages(&common::reference_manifests(), &spec).map_err(|e| e.to_string())?;
    let r = c.pairs.result.ok_or("no test result")?;
    ensure!(r.p_value <= 0.05, "p = {}", r.p_value);
    ensure!(
        r.median_difference > 0.0,
        "median difference {}",
        r.median_difference
    );
    Ok(format!(
        "{} pairs, {} test, p = {:.2e}, median difference {:+.4}",
        c.pairs.len(),
        r.mode,
        r.p_value,
        r.median_difference
    ))
}

// 9 ------------------------------------------------------------------------

const TINY: &str = "
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.d_ff = 32
limits.max_input_tokens = 96
limits.max_output_tokens = 48
data.general.kind = general_instruction
data.general.train = 30
data.classification.kind = classification_like
data.classification.train = 30
data.classification.test = 7
data.summarization.kind = summarization_like
data.summarization.train = 10
data.summarization.test = 3
stage1.epochs = 1
stage3.epochs = 1
quant.calibration_samples = 8
";

fn determinism_and_persistence() -> Verdict {
    let mut corrupt_classes = 0;
    for method in [QuantMethod::BnbNf4, QuantMethod::Gptq] {
        let cfg = ExperimentConfig::parse(TINY)
            .map_err(|e| e.to_string())?
            .with_method(method);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = run_pipeline(&cfg, a.path(), &RunOptions::default()).map_err(|e| e.to_string())?;
        let mb = run_pipeline(&cfg, b.path(), &RunOptions::default()).map_err(|e| e.to_string())?;
        for (x, y) in ma.stages.iter().zip(&mb.stages) {
            ensure!(
                serde_json::to_string(&x.metrics).unwrap()
                    == serde_json::to_string(&y.metrics).unwrap(),
                "{method}: metric reports of {} differ",
                x.label
            );
        }
        for f in [STAGE1_FILE, STAGE2_FILE, STAGE3_FILE] {
            let bytes = std::fs::read(a.path().join(f)).unwrap();
            ensure!(
                bytes == std::fs::read(b.path().join(f)).unwrap(),
                "{method}: {f} differs between runs"
            );
            let reloaded = Checkpoint::load(&a.path().join(f)).map_err(|e| e.to_string())?;
            ensure!(
                reloaded.to_bytes().unwrap() == bytes,
                "{method}: {f} does not roundtrip"
            );
        }
        // tensors, codes, scales and adapters survive a roundtrip bit for bit
        let q = Checkpoint::load(&a.path().join(STAGE3_FILE))
            .unwrap()
            .into_qlora()
            .map_err(|e| e.to_string())?;
        let again = Checkpoint::from_qlora(&cfg.model, &q).to_bytes().unwrap();
        ensure!(
            again == std::fs::read(a.path().join(STAGE3_FILE)).unwrap(),
            "{method}: qlora state changed on reload"
        );

        let good = std::fs::read(a.path().join(STAGE2_FILE)).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0x20;
        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        let truncated = good[..good.len() - 9].to_vec();
        let mut flipped = good.clone();
        let mid = good.len() / 2;
        flipped[mid] ^= 0x04;
        let cases: [(&str, Vec<u8>, fn(&PipelineError) -> bool); 4] = [
            ("bad magic", bad_magic, |e| {
                matches!(e, PipelineError::BadMagic)
            }),
            ("bad version", bad_version, |e| {
                matches!(e, PipelineError::UnsupportedVersion(99))
            }),
            ("truncated", truncated, |e| {
                matches!(e, PipelineError::Truncated(_))
            }),
            ("flipped bit", flipped, |e| {
                matches!(e, PipelineError::ChecksumMismatch { .. })
            }),
        ];
        for (what, bytes, expect) in cases {
            match Checkpoint::from_bytes(&bytes) {
                Ok(_) => return Err(format!("{what} checkpoint accepted")),
                Err(e) if expect(&e) => corrupt_classes += 1,
                Err(e) => return Err(format!("{what}: wrong error {e}")),
            }
        }
    }
    Ok(format!("both methods bit-identical across reruns, {corrupt_classes}/8 corruptions rejected with the right class"))
}

// 10 -----------------------------------------------------------------------

const BPW_TOL: f64 = 0.01;

fn storage_accounting() -> Verdict {
    let expected = 4.0 + 8.0 / 64.0 + 64.0 / (64.0 * 256.0);
    let arithmetic = format_bits_per_weight(64, Some(256));
    ensure!(
        arithmetic == expected,
        "format arithmetic {arithmetic} != {expected}"
    );

    let cfg = ModelConfig::default();
    let params = Parameters::<f32>::init(&cfg, &mut Rng::new(10, 0)).map_err(|e| e.to_string())?;
    let qc = QuantConfig::for_method(QuantMethod::BnbNf4);
    ensure!(
        qc.block_size == 64 && qc.double_quant_chunk == Some(256),
        "bnb defaults changed"
    );
    let qm = quantize_model(&params, &cfg, &qc, None).map_err(|e| e.to_string())?;
    let bytes = Checkpoint::from_quantized(&cfg, &qm)
        .to_bytes()
        .map_err(|e| e.to_string())?;
    let sections = Checkpoint::directory(&bytes).map_err(|e| e.to_string())?;
    let (b, n) = sections
        .iter()
        .filter(|s| s.quantized)
        .fold((0usize, 0usize), |(b, n), s| (b + s.bytes, n + s.elements));
    ensure!(n > 0, "no quantized sections");
    let measured = 8.0 * b as f64 / n as f64;
    let reported = qm.bits_per_weight();
    ensure!(
        (measured - arithmetic).abs() / arithmetic <= BPW_TOL,
        "serialized {measured:.4} vs arithmetic {arithmetic:.4}"
    );
    ensure!(
        (reported - measured).abs() / measured <= BPW_TOL,
        "reported {reported:.4} vs serialized {measured:.4}"
    );
    Ok(format!(
        "arithmetic {arithmetic:.4}, serialized sections {measured:.4}, reported {reported:.4} bits/weight"
    ))
}

// --------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "gradient correctness", gradients),
        (2, "quantization error bound", quantization_bound),
        (3, "nf4 codebook", nf4_codebook),
        (4, "gptq sandwich", gptq_sandwich),
        (5, "pipeline behavior over 5 seeds", behavioral_reproduction),
        (6, "rouge golden values", rouge_golden),
        (7, "wilcoxon exactness", wilcoxon_exact),
        (8, "reference table statistics", reference_statistics),
        (
            9,
            "determinism and persistence",
            determinism_and_persistence,
        ),
        (10, "storage accounting", storage_accounting),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    // libtest flags such as --list are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
