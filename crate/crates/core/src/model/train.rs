use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimizerState, ParamStore};
use super::schedule::{LrSchedule, ScheduleKind};
use super::tokenizer::Example;
use super::transformer::{loss_and_grads, Weights};
use super::{ModelConfig, Parameters};
use crate::numerics::{Real, Rng};
use crate::{Error, Result};

/// Hyperparameters shared by the full fine-tuning and adapter training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 3e-3,
            schedule: ScheduleKind::Linear,
            warmup_steps: 0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Per-step training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    /// `step <n> lr <f> loss <f>`, one line per step.
    pub fn line(e: &LogEntry) -> String {
        format!("step {} lr {:e} loss {:.6}", e.step, e.lr, e.loss)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&Self::line(e));
            s.push('\n');
        }
        s
    }

    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for e in &self.entries {
            if sums.len() <= e.epoch {
                sums.resize(e.epoch + 1, (0.0, 0));
            }
            sums[e.epoch].0 += e.loss;
            sums[e.epoch].1 += 1;
        }
        sums.iter().map(|(s, n)| s / (*n).max(1) as f64).collect()
    }
}

pub(crate) fn check_dataset(cfg: &ModelConfig, data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ex in data {
        let n = ex.tokens.len().saturating_sub(1);
        if n > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: cfg.max_seq_len,
            });
        }
        if ex.response_len() == 0 || ex.prompt_len == 0 {
            return Err(Error::Config("example without prompt or response".into()));
        }
    }
    Ok(())
}

/// Minibatch AdamW loop over shuffled epochs.
///
/// Epoch `e` is shuffled with stream `e` of `tc.seed`, so the visiting order is
/// a pure function of the seed.
pub fn train_loop<T, M>(
    model: &mut M,
    cfg: &ModelConfig,
    data: &[Example],
    tc: &TrainConfig,
) -> Result<TrainLog>
where
    T: Real,
    M: Weights<T> + ParamStore<T>,
{
    check_dataset(cfg, data)?;
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let total = tc.total_steps(data.len());
    let schedule = LrSchedule::new(tc.schedule, tc.lr, total, tc.warmup_steps)?;
    let mut opt = OptimizerState::<T>::new(tc.optimizer);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let order = Rng::new(tc.seed, epoch as u64).permutation(data.len());
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = loss_and_grads(&*model, cfg, &batch)?;
            let lr = schedule.lr_at_step(step)?;
            opt.adamw_step(model, &grads, lr)?;
            log.entries.push(LogEntry {
                step,
                epoch,
                lr,
                loss: loss.as_f64(),
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Full-parameter supervised fine-tuning.
pub fn train_sft<T: Real>(
    mut params: Parameters<T>,
    cfg: &ModelConfig,
    data: &[Example],
    tc: &TrainConfig,
) -> Result<(Parameters<T>, TrainLog)> {
    params.validate(cfg)?;
    let log = train_loop(&mut params, cfg, data, tc)?;
    Ok((params, log))
}
