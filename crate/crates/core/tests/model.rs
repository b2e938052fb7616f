mod common;

use std::collections::BTreeSet;

use common::*;
use ptqlora_core::model::{
    batch_loss, forward, forward_logits, generate_greedy, loss_and_grads, train_sft, Example,
    FreezeView, GenerationLimits, ModelConfig, Parameters, Tokenizer, TrainConfig,
};
use ptqlora_core::numerics::{layer_norm_rows, matmul_nt};
use ptqlora_core::{Error, Rng, Tensor};

fn check_all_gradients(tie: bool) {
    let cfg = small_config(tie);
    let params = random_params(&cfg, 11);
    let batch = random_examples(&cfg, 3, 7, 5);
    let (_, grads) = loss_and_grads(&params, &cfg, &batch).unwrap();
    assert_eq!(grads.len(), params.len(), "every tensor gets a gradient");
    for (name, analytic) in &grads {
        let mut p = params.clone();
        let mut t = p.get(name).unwrap().clone();
        let numeric = numeric_grad(&mut t, 1e-5, |t| {
            p.insert(name.clone(), t.clone());
            batch_loss(&p, &cfg, &batch).unwrap()
        });
        let err = max_rel_err(analytic, &numeric);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    check_all_gradients(false);
}

#[test]
fn tied_head_gradients_match_finite_differences() {
    check_all_gradients(true);
}

#[test]
fn output_shape_is_batch_seq_vocab() {
    let cfg = small_config(false);
    let p = random_params(&cfg, 1);
    let a = [1usize, 2, 3, 4];
    let b = [4usize, 3, 2, 1];
    let logits = forward_logits(&p, &cfg, &[&a, &b]).unwrap();
    assert_eq!(logits.shape(), &[2, 4, cfg.vocab_size]);
}

#[test]
fn causal_mask_over_random_positions() {
    let cfg = small_config(false);
    let p = random_params(&cfg, 2);
    let mut rng = Rng::new(3, 0);
    for _ in 0..20 {
        let len = cfg.max_seq_len;
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(13) as usize).collect();
        let t = rng.below(len as u64 - 1) as usize;
        let mut perturbed = tokens.clone();
        perturbed[t + 1] = (perturbed[t + 1] + 1 + rng.below(11) as usize) % cfg.vocab_size;
        let base = logits_of(&p, &cfg, &tokens);
        let other = logits_of(&p, &cfg, &perturbed);
        for pos in 0..=t {
            assert_eq!(
                base.row(pos),
                other.row(pos),
                "position {pos} saw the future"
            );
        }
        assert_ne!(base.row(t + 1), other.row(t + 1));
    }
}

#[test]
fn zero_layer_model_matches_closed_form() {
    let cfg = ModelConfig {
        n_layers: 0,
        ..small_config(false)
    };
    let p = random_params(&cfg, 4);
    let tokens = [3usize, 1, 12, 0, 7];
    let mut x = Tensor::<f64>::zeros(&[tokens.len(), cfg.d_model]);
    for (t, &id) in tokens.iter().enumerate() {
        for j in 0..cfg.d_model {
            x.set(
                t,
                j,
                p.get("tok_emb").unwrap().at(id, j) + p.get("pos_emb").unwrap().at(t, j),
            );
        }
    }
    let h = layer_norm_rows(
        &x,
        p.get("ln_f.gamma").unwrap(),
        p.get("ln_f.beta").unwrap(),
        1e-5,
    )
    .unwrap();
    let expected = matmul_nt(&h, p.get("head.weight").unwrap()).unwrap();
    let got = logits_of(&p, &cfg, &tokens);
    assert!(got.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn fresh_model_loss_is_near_log_vocab() {
    let cfg = ModelConfig::default();
    let p: Parameters<f32> = Parameters::init(&cfg, &mut Rng::new(0, 0)).unwrap();
    let batch: Vec<Example> = ["hello there", "what is the purpose", "abc"]
        .iter()
        .map(|s| Tokenizer::encode_example(s, "Billing Questions"))
        .collect();
    let loss = batch_loss(&p, &cfg, &batch).unwrap() as f64;
    let ln_v = (cfg.vocab_size as f64).ln();
    assert!(
        (loss - ln_v).abs() / ln_v < 0.05,
        "loss {loss} vs ln V {ln_v}"
    );
}

#[test]
fn fully_frozen_model_has_no_gradients() {
    let cfg = small_config(false);
    let p = random_params(&cfg, 5);
    let frozen: BTreeSet<String> = p.names().cloned().collect();
    let view = FreezeView {
        params: &p,
        frozen: &frozen,
    };
    let (_, grads) = loss_and_grads(&view, &cfg, &random_examples(&cfg, 2, 5, 1)).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn forward_rejects_bad_tokens() {
    let cfg = small_config(false);
    let p = random_params(&cfg, 5);
    assert!(matches!(
        forward(&p, &cfg, &[1, 13]),
        Err(Error::TokenOutOfRange { id: 13, .. })
    ));
    assert!(matches!(
        forward(&p, &cfg, &[1; 11]),
        Err(Error::SequenceTooLong { len: 11, max: 10 })
    ));
}

#[test]
fn prompt_only_batch_has_undefined_loss() {
    let cfg = small_config(false);
    let p = random_params(&cfg, 5);
    let ex = Example {
        tokens: vec![1, 2, 3],
        prompt_len: 3,
    };
    assert_eq!(
        loss_and_grads(&p, &cfg, &[ex]).unwrap_err(),
        Error::UndefinedLoss
    );
}

fn toy_task() -> (ModelConfig, Vec<Example>) {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        ..ModelConfig::default()
    };
    let words = ["red", "blue", "green", "pink"];
    let labels = ["A", "B", "C", "D"];
    let data = (0..64)
        .map(|i| Tokenizer::encode_example(words[i % 4], labels[i % 4]))
        .collect();
    (cfg, data)
}

#[test]
fn sft_reduces_loss_and_is_deterministic() {
    let (cfg, data) = toy_task();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-2,
        seed: 17,
        ..TrainConfig::default()
    };
    assert_eq!(TrainConfig::default().epochs, 2);
    let init: Parameters<f32> = Parameters::init(&cfg, &mut Rng::new(17, 0)).unwrap();
    let (a, log) = train_sft(init.clone(), &cfg, &data, &tc).unwrap();
    let means = log.epoch_mean_losses();
    assert_eq!(means.len(), 2);
    assert!(means[1] < means[0], "epoch losses {means:?}");
    assert_eq!(log.entries.len(), 16);
    assert!(log.to_text().starts_with("step 0 lr "));

    let (b, _) = train_sft(init, &cfg, &data, &tc).unwrap();
    assert_eq!(a, b, "same seed must give bit-identical parameters");
}

#[test]
fn sft_rejects_empty_dataset() {
    let (cfg, _) = toy_task();
    let init: Parameters<f32> = Parameters::init(&cfg, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(
        train_sft(init, &cfg, &[], &TrainConfig::default()).unwrap_err(),
        Error::EmptyDataset
    );
}

#[test]
fn greedy_decoding_contract() {
    let (cfg, _) = toy_task();
    let p: Parameters<f32> = Parameters::init(&cfg, &mut Rng::new(1, 0)).unwrap();
    let prompt = Tokenizer::encode_prompt("green");
    let limits = GenerationLimits {
        max_input_tokens: 320,
        max_output_tokens: 5,
    };
    let a = generate_greedy(&p, &cfg, &prompt, &limits).unwrap();
    let b = generate_greedy(&p, &cfg, &prompt, &limits).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 5);
    assert_eq!(GenerationLimits::FULL_SCALE.max_output_tokens, 800);
    assert_eq!(GenerationLimits::FULL_SCALE.max_input_tokens, 3200);

    assert_eq!(
        generate_greedy(&p, &cfg, &[], &limits).unwrap_err(),
        Error::EmptyInput("prompt")
    );
}

#[test]
fn long_prompts_are_truncated_from_the_left() {
    let (cfg, _) = toy_task();
    let p: Parameters<f32> = Parameters::init(&cfg, &mut Rng::new(1, 0)).unwrap();
    let limits = GenerationLimits {
        max_input_tokens: 6,
        max_output_tokens: 3,
    };
    let long = Tokenizer::encode_prompt("a very long prompt indeed");
    let tail = long[long.len() - 6..].to_vec();
    assert_eq!(
        generate_greedy(&p, &cfg, &long, &limits).unwrap(),
        generate_greedy(&p, &cfg, &tail, &limits).unwrap()
    );
}

#[test]
fn cached_decoding_matches_full_forward_bitwise() {
    use ptqlora_core::model::{forward_step, KvCache};
    for tie in [false, true] {
        let cfg = small_config(tie);
        let p: Parameters<f32> = random_params(&cfg, 8).cast();
        let tokens = [3usize, 7, 1, 12, 0, 5, 9, 2, 11, 4];
        let (full, _) = forward(&p, &cfg, &tokens).unwrap();
        let mut cache = KvCache::new(&cfg);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = forward_step(&p, &cfg, &mut cache, tok).unwrap();
            assert_eq!(row.as_slice(), full.row(t), "position {t}");
        }
        assert!(matches!(
            forward_step(&p, &cfg, &mut cache, 1),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
