use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(alloc::format!("unknown scheduler `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// Linear warmup from 0 to `base_lr`, then linear or cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(
        kind: ScheduleKind,
        base_lr: f64,
        total_steps: usize,
        warmup_steps: usize,
    ) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::Config(alloc::format!(
                "base_lr must be > 0, got {base_lr}"
            )));
        }
        if warmup_steps > total_steps {
            return Err(Error::Config(alloc::format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Self {
            kind,
            base_lr,
            total_steps,
            warmup_steps,
        })
    }

    pub fn lr_at_step(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            // degenerate schedule: the only post-warmup point is the end
            return Ok(if self.total_steps == 0 {
                self.base_lr
            } else {
                0.0
            });
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(match self.kind {
            ScheduleKind::Linear => self.base_lr * (1.0 - progress),
            ScheduleKind::Cosine => {
                self.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
            }
        })
    }
}

/// Learning rates and schedulers reported for the 7B fine-tuning runs, per
/// dataset family (internal / external).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSetting {
    pub model: &'static str,
    /// `"SFT"`, `"BNB-4bit+QLoRA"` or `"GPTQ-4bit+QLoRA"`.
    pub stage: &'static str,
    pub internal_lr: f64,
    pub external_lr: f64,
    pub internal_schedule: ScheduleKind,
    pub external_schedule: ScheduleKind,
}

use ScheduleKind::{Cosine, Linear};

pub const REFERENCE_SETTINGS: [ReferenceSetting; 9] = [
    ReferenceSetting {
        model: "Qwen2-7B",
        stage: "SFT",
        internal_lr: 3e-5,
        external_lr: 3e-5,
        internal_schedule: Linear,
        external_schedule: Cosine,
    },
    ReferenceSetting {
        model: "Qwen2-7B",
        stage: "BNB-4bit+QLoRA",
        internal_lr: 3e-5,
        external_lr: 3e-5,
        internal_schedule: Cosine,
        external_schedule: Cosine,
    },
    ReferenceSetting {
        model: "Qwen2-7B",
        stage: "GPTQ-4bit+QLoRA",
        internal_lr: 3e-5,
        external_lr: 3e-5,
        internal_schedule: Cosine,
        external_schedule: Cosine,
    },
    ReferenceSetting {
        model: "Llama2-7B",
        stage: "SFT",
        internal_lr: 6e-6,
        external_lr: 6e-6,
        internal_schedule: Linear,
        external_schedule: Linear,
    },
    ReferenceSetting {
        model: "Llama2-7B",
        stage: "BNB-4bit+QLoRA",
        internal_lr: 2e-4,
        external_lr: 5e-4,
        internal_schedule: Cosine,
        external_schedule: Linear,
    },
    ReferenceSetting {
        model: "Llama2-7B",
        stage: "GPTQ-4bit+QLoRA",
        internal_lr: 5e-4,
        external_lr: 5e-4,
        internal_schedule: Cosine,
        external_schedule: Linear,
    },
    ReferenceSetting {
        model: "Mistral-7B-v0.3",
        stage: "SFT",
        internal_lr: 6e-6,
        external_lr: 6e-6,
        internal_schedule: Linear,
        external_schedule: Linear,
    },
    ReferenceSetting {
        model: "Mistral-7B-v0.3",
        stage: "BNB-4bit+QLoRA",
        internal_lr: 5e-4,
        external_lr: 5e-4,
        internal_schedule: Linear,
        external_schedule: Linear,
    },
    ReferenceSetting {
        model: "Mistral-7B-v0.3",
        stage: "GPTQ-4bit+QLoRA",
        internal_lr: 5e-4,
        external_lr: 5e-4,
        internal_schedule: Linear,
        external_schedule: Linear,
    },
];

pub fn reference_setting(model: &str, stage: &str) -> Option<&'static ReferenceSetting> {
    REFERENCE_SETTINGS
        .iter()
        .find(|s| s.model.eq_ignore_ascii_case(model) && s.stage.eq_ignore_ascii_case(stage))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let s = LrSchedule::new(ScheduleKind::Linear, 3e-5, 100, 0).unwrap();
        assert_eq!(s.lr_at_step(0).unwrap(), 3e-5);
        assert_eq!(s.lr_at_step(100).unwrap(), 0.0);
        assert!(matches!(
            s.lr_at_step(101),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn cosine_midpoint_is_half() {
        let s = LrSchedule::new(ScheduleKind::Cosine, 2e-4, 100, 0).unwrap();
        assert!((s.lr_at_step(50).unwrap() - 1e-4).abs() < 1e-18);
        assert!(s.lr_at_step(100).unwrap().abs() < 1e-20);
    }

    #[test]
    fn continuous_at_warmup_boundary_and_non_negative() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = LrSchedule::new(kind, 1e-3, 200, 20).unwrap();
            assert_eq!(s.lr_at_step(0).unwrap(), 0.0);
            let before = s.lr_at_step(19).unwrap();
            let at = s.lr_at_step(20).unwrap();
            assert_eq!(at, 1e-3);
            assert!((at - before) <= 1e-3 / 20.0 + 1e-15);
            for step in 0..=200 {
                assert!(s.lr_at_step(step).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(LrSchedule::new(ScheduleKind::Linear, 0.0, 10, 0).is_err());
        assert!(LrSchedule::new(ScheduleKind::Linear, 1e-3, 10, 11).is_err());
    }

    #[test]
    fn reference_table_lookup() {
        let s = reference_setting("Llama2-7B", "BNB-4bit+QLoRA").unwrap();
        assert_eq!((s.internal_lr, s.external_lr), (2e-4, 5e-4));
        assert_eq!(
            reference_setting("Qwen2-7B", "SFT").unwrap().internal_lr,
            3e-5
        );
    }
}
