use alloc::format;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest token sequence the positional table covers.
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: super::Tokenizer::VOCAB_SIZE,
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 401,
            tie_embeddings: false,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be >= 1".into()));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("ln_eps must be > 0 and init_std >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        let tiny_vocab = ModelConfig {
            vocab_size: 1,
            ..ModelConfig::default()
        };
        assert!(tiny_vocab.validate().is_err());
    }
}
