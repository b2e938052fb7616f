#![allow(dead_code)]

use ptqlora_core::model::{Example, ModelConfig, Parameters, Weights};
use ptqlora_core::{Rng, Tensor};

pub fn small_config(tie: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 10,
        tie_embeddings: tie,
        init_std: 0.3,
        ln_eps: 1e-5,
    }
}

pub fn random_examples(cfg: &ModelConfig, n: usize, len: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed, 99);
    (0..n)
        .map(|i| Example {
            tokens: (0..len)
                .map(|_| rng.below(cfg.vocab_size as u64) as usize)
                .collect(),
            prompt_len: 1 + i % 3,
        })
        .collect()
}

pub fn random_params(cfg: &ModelConfig, seed: u64) -> Parameters<f64> {
    let mut p: Parameters<f64> = Parameters::init(cfg, &mut Rng::new(seed, 0)).unwrap();
    // Non-trivial norms and biases so every gradient path is exercised.
    let mut rng = Rng::new(seed, 1);
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            let t = p.get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v += rng.normal(0.0, 0.2);
            }
        }
    }
    p
}

/// Central finite differences of `loss` with respect to every element of `tensor`.
pub fn numeric_grad(
    tensor: &mut Tensor<f64>,
    h: f64,
    mut loss: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut g = Tensor::zeros(tensor.shape());
    for i in 0..tensor.len() {
        let orig = tensor.data()[i];
        tensor.data_mut()[i] = orig + h;
        let lp = loss(tensor);
        tensor.data_mut()[i] = orig - h;
        let lm = loss(tensor);
        tensor.data_mut()[i] = orig;
        g.data_mut()[i] = (lp - lm) / (2.0 * h);
    }
    g
}

/// Largest per-element relative error. The denominator is floored at
/// `1e-3 * max|g|` and at `1e-6` so gradients that are exactly zero in theory
/// (key biases under softmax shift invariance) compare against round-off.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let norm = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * norm).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn logits_of<W: Weights<f64>>(w: &W, cfg: &ModelConfig, tokens: &[usize]) -> Tensor<f64> {
    ptqlora_core::model::forward(w, cfg, tokens).unwrap().0
}
