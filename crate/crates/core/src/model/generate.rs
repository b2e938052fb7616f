use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use super::transformer::{forward_step, KvCache, Weights};
use super::ModelConfig;
use crate::numerics::Real;
use crate::{Error, Result};

/// Token budgets for prompts and generated responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLimits {
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
}

impl GenerationLimits {
    /// 3200 input / 800 output tokens, the budgets of the 7B-scale setup.
    pub const FULL_SCALE: GenerationLimits = GenerationLimits {
        max_input_tokens: 3200,
        max_output_tokens: 800,
    };
}

impl Default for GenerationLimits {
    /// One tenth of [`GenerationLimits::FULL_SCALE`].
    fn default() -> Self {
        Self {
            max_input_tokens: 320,
            max_output_tokens: 80,
        }
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding. Returns the generated tokens without the end-of-sequence marker.
///
/// Prompts longer than `limits.max_input_tokens` keep their last tokens.
/// Decoding stops at end-of-sequence, after `limits.max_output_tokens` tokens,
/// or when the context fills `cfg.max_seq_len`.
pub fn generate_greedy<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    prompt: &[usize],
    limits: &GenerationLimits,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let keep = limits.max_input_tokens.min(cfg.max_seq_len).max(1);
    let start = prompt.len().saturating_sub(keep);
    let ctx = &prompt[start..];
    let mut cache = KvCache::new(cfg);
    let mut logits = Vec::new();
    for &tok in ctx {
        logits = forward_step(w, cfg, &mut cache, tok)?;
    }
    let mut out = Vec::new();
    while out.len() < limits.max_output_tokens {
        let next = argmax(&logits);
        if next == Tokenizer::EOS {
            break;
        }
        out.push(next);
        if cache.len() == cfg.max_seq_len {
            break;
        }
        logits = forward_step(w, cfg, &mut cache, next)?;
    }
    Ok(out)
}

/// Truncated prompt actually seen by [`generate_greedy`].
pub fn truncate_prompt<'a>(
    prompt: &'a [usize],
    cfg: &ModelConfig,
    limits: &GenerationLimits,
) -> &'a [usize] {
    let keep = limits.max_input_tokens.min(cfg.max_seq_len).max(1);
    &prompt[prompt.len().saturating_sub(keep)..]
}
