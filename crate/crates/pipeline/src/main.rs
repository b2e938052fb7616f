use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptqlora::checkpoint::Checkpoint;
use ptqlora::compare::{compare_stages, CompareSpec};
use ptqlora::config::ExperimentConfig;
use ptqlora::error::{PipelineError, Result};
use ptqlora::manifest::RunManifest;
use ptqlora::pipeline::{
    evaluate, prepare_data, run_pipeline, run_suite, write_datasets, RunOptions,
};
use ptqlora::report::{build_report, emit_report, ReportFormat};
use ptqlora_core::eval::{MetricReport, WilcoxonMode};
use ptqlora_core::{QuantMethod, StageLabel};

#[derive(Parser)]
#[command(
    name = "ptqlora",
    version,
    about = "SFT, 4-bit PTQ and QLoRA on a tiny transformer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines); defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Print stage progress.
    #[arg(long, short)]
    verbose: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured train/test splits as JSON lines.
    GenData(Common),
    /// Stage 1: full fine-tuning into `<out>`.
    TrainSft(Common),
    /// Stage 2: quantize the stage-1 model of the run in `<out>`.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<QuantMethod>,
    },
    /// Stage 3: adapter fine-tuning over the quantized model of the run in `<out>`.
    TrainQlora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<QuantMethod>,
    },
    /// Score a checkpoint on the configured test splits.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the metric report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// All three stages. Several seeds or methods run as a suite under `<out>/<method>/seed-<n>`.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        method: Vec<QuantMethod>,
        /// Seeds for a suite, e.g. `0,1,2,3,4`.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Vec<u64>,
    },
    /// Stage-by-metric table over run manifests (files or run directories).
    Report {
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Paired Wilcoxon signed-rank test between two stages.
    Compare {
        /// Stage label, `*` as wildcard (e.g. `PTQ-*-4bit+QLoRA`).
        #[arg(long)]
        stage_a: String,
        #[arg(long)]
        stage_b: String,
        #[arg(long, default_value = "F1-micro")]
        metric: String,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = "auto")]
        mode: WilcoxonMode,
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
}

fn print_metrics(r: &MetricReport) {
    println!("{}", r.stage);
    for t in &r.tasks {
        let cols: Vec<String> = t
            .columns()
            .iter()
            .map(|(k, v)| format!("{k} {v:.4}"))
            .collect();
        println!("  {:<16} n={:<4} {}", t.task, t.n, cols.join("  "));
    }
}

fn stage_cmd(common: &Common, method: Option<QuantMethod>, stop: usize) -> Result<()> {
    let mut cfg = common.config()?;
    if let Some(m) = method {
        cfg = cfg.with_method(m);
    }
    let opts = RunOptions {
        stop_after: Some(stop),
        verbose: common.verbose,
        ..Default::default()
    };
    let m = run_pipeline(&cfg, &common.out, &opts)?;
    for s in &m.stages {
        print_metrics(&s.metrics);
    }
    Ok(())
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<RunManifest>> {
    paths.iter().map(|p| RunManifest::load(p)).collect()
}

fn eval_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<MetricReport> {
    let ck = Checkpoint::load(path)?;
    let stage = ck.stage()?;
    let model = ck.model_config()?;
    if model != cfg.model {
        return Err(PipelineError::Config(
            "checkpoint model shape differs from the config".into(),
        ));
    }
    let data = prepare_data(cfg)?;
    let report = match stage {
        StageLabel::Sft16Bit => evaluate(cfg, &ck.into_params()?, stage, &data)?.0,
        StageLabel::Ptq(_) => evaluate(cfg, &ck.into_quantized()?, stage, &data)?.0,
        StageLabel::PtqQlora(_) => evaluate(cfg, &ck.into_qlora()?, stage, &data)?.0,
    };
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let data = prepare_data(&c.config()?)?;
            for p in write_datasets(&data, &c.out)? {
                println!("{}", p.display());
            }
            if data.dropped > 0 {
                eprintln!("dropped {} records over the token limits", data.dropped);
            }
        }
        Cmd::TrainSft(c) => stage_cmd(&c, None, 1)?,
        Cmd::Quantize { common, method } => stage_cmd(&common, method, 2)?,
        Cmd::TrainQlora { common, method } => stage_cmd(&common, method, 3)?,
        Cmd::Eval {
            config,
            seed,
            checkpoint,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let r = eval_checkpoint(&cfg, &checkpoint)?;
            print_metrics(&r);
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&r)?)
                    .map_err(|e| PipelineError::io(&p, e))?;
            }
        }
        Cmd::Pipeline {
            common,
            method,
            seeds,
        } => {
            let cfg = common.config()?;
            if seeds.is_empty() && method.len() <= 1 {
                let cfg = match method.first() {
                    Some(&m) => cfg.with_method(m),
                    None => cfg,
                };
                let opts = RunOptions {
                    verbose: common.verbose,
                    ..Default::default()
                };
                let m = run_pipeline(&cfg, &common.out, &opts)?;
                print!("{}", emit_report(&[m], ReportFormat::Table)?);
            } else {
                let seeds = if seeds.is_empty() {
                    vec![cfg.seed]
                } else {
                    seeds
                };
                let methods = if method.is_empty() {
                    vec![cfg.quant.method]
                } else {
                    method
                };
                let ms = run_suite(&cfg, &seeds, &methods, &common.out, common.verbose)?;
                print!("{}", build_report(&ms)?.to_text());
            }
        }
        Cmd::Report { format, manifests } => {
            print!("{}", emit_report(&load_manifests(&manifests)?, format)?);
        }
        Cmd::Compare {
            stage_a,
            stage_b,
            metric,
            task,
            mode,
            manifests,
        } => {
            let spec = CompareSpec {
                stage_a,
                stage_b,
                metric,
                task,
                mode,
            };
            print!(
                "{}",
                compare_stages(&load_manifests(&manifests)?, &spec)?.render()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
