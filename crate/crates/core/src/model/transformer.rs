//! Pre-norm decoder-only transformer with hand-derived backward pass.
//!
//! Block: `x += O(attn(LN1(x)))`, `x += Down(gelu(Up(LN2(x))))`, then a final
//! LayerNorm and the output head (or the transposed token embedding when tied).
//! Every linear layer computes `y = x Wᵀ + b`, plus `scale · (x Aᵀ) Bᵀ` when the
//! weight source attaches a low-rank adapter to it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{bias_of, linear_weight, Parameters};
use super::tokenizer::Example;
use super::ModelConfig;
use crate::numerics::{
    add_row_bias, cross_entropy, gelu, gelu_grad, layer_norm_backward, layer_norm_rows_cached,
    matmul, matmul_nt, matmul_tn, LayerNormCache, Real, Tensor,
};
use crate::{Error, Result};

use super::tokenizer::IGNORE_INDEX;

/// Gradients keyed by parameter name (adapter factors use [`lora_a_name`] / [`lora_b_name`]).
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

pub fn lora_a_name(weight: &str) -> String {
    format!("{weight}.lora_a")
}

pub fn lora_b_name(weight: &str) -> String {
    format!("{weight}.lora_b")
}

/// Low-rank factors attached to one linear weight.
#[derive(Clone, Copy, Debug)]
pub struct AdapterView<'a, T> {
    /// `r × d_in`
    pub a: &'a Tensor<T>,
    /// `d_out × r`
    pub b: &'a Tensor<T>,
    /// `alpha / r`
    pub scale: T,
}

/// Source of model tensors for the forward and backward passes.
pub trait Weights<T: Real> {
    fn tensor(&self, name: &str) -> Result<&Tensor<T>>;

    fn adapter(&self, _weight: &str) -> Option<AdapterView<'_, T>> {
        None
    }

    /// Whether `name` receives a gradient entry.
    fn trains_base(&self, name: &str) -> bool;
}

impl<T: Real> Weights<T> for Parameters<T> {
    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
    }

    fn trains_base(&self, _name: &str) -> bool {
        true
    }
}

/// Dense parameters with some tensors excluded from training.
pub struct FreezeView<'a, T> {
    pub params: &'a Parameters<T>,
    pub frozen: &'a BTreeSet<String>,
}

impl<T: Real> Weights<T> for FreezeView<'_, T> {
    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name)
    }

    fn trains_base(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }
}

#[derive(Clone, Debug)]
struct LinearCache<T> {
    /// `x · Aᵀ` when an adapter is attached.
    xa: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    ln1: LayerNormCache<T>,
    h1: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention probabilities per head, `T × T`, zero above the diagonal.
    probs: Vec<Tensor<T>>,
    attn: Tensor<T>,
    ln2: LayerNormCache<T>,
    h2: Tensor<T>,
    up: Tensor<T>,
    act: Tensor<T>,
    lin: [LinearCache<T>; 6],
}

/// Activations saved by [`forward`] for an exact backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    tokens: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    ln_f: LayerNormCache<T>,
    hf: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Input rows (`T × features`) of every projection weight, for calibration.
    pub fn projection_inputs(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, c) in self.layers.iter().enumerate() {
            out.push((linear_weight(l, "attn.q"), &c.h1));
            out.push((linear_weight(l, "attn.k"), &c.h1));
            out.push((linear_weight(l, "attn.v"), &c.h1));
            out.push((linear_weight(l, "attn.o"), &c.attn));
            out.push((linear_weight(l, "mlp.up"), &c.h2));
            out.push((linear_weight(l, "mlp.down"), &c.act));
        }
        out
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

fn head_name(cfg: &ModelConfig) -> &'static str {
    if cfg.tie_embeddings {
        "tok_emb"
    } else {
        "head.weight"
    }
}

fn linear_forward<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    name: &str,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, LinearCache<T>)> {
    let weight = w.tensor(name)?;
    let mut y = matmul_nt(x, weight)?;
    if let Some(bias) = bias_of(name) {
        add_row_bias(&mut y, w.tensor(&bias)?)?;
    }
    let xa = match w.adapter(name) {
        Some(ad) => {
            let xa = matmul_nt(x, ad.a)?;
            let z = matmul_nt(&xa, ad.b)?;
            y.add_scaled(&z, ad.scale)?;
            Some(xa)
        }
        None => None,
    };
    Ok((y, LinearCache { xa }))
}

fn accumulate<T: Real>(grads: &mut Grads<T>, name: String, g: Tensor<T>) -> Result<()> {
    match grads.get_mut(&name) {
        Some(acc) => acc.add_scaled(&g, T::one()),
        None => {
            grads.insert(name, g);
            Ok(())
        }
    }
}

fn column_sums<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut s = Tensor::zeros(&[x.cols()]);
    for r in 0..x.rows() {
        for (o, &v) in s.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    s
}

fn linear_backward<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    name: &str,
    x: &Tensor<T>,
    cache: &LinearCache<T>,
    dy: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let weight = w.tensor(name)?;
    let mut dx = matmul(dy, weight)?;
    if w.trains_base(name) {
        accumulate(grads, name.into(), matmul_tn(dy, x)?)?;
    }
    if let Some(bias) = bias_of(name) {
        if w.trains_base(&bias) {
            accumulate(grads, bias, column_sums(dy))?;
        }
    }
    if let Some(ad) = w.adapter(name) {
        let xa = cache
            .xa
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("adapter on `{name}` missing from cache")))?;
        let dz = dy.map(|v| v * ad.scale);
        accumulate(grads, lora_b_name(name), matmul_tn(&dz, xa)?)?;
        let dxa = matmul(&dz, ad.b)?;
        accumulate(grads, lora_a_name(name), matmul_tn(&dxa, x)?)?;
        dx.add_scaled(&matmul(&dxa, ad.a)?, T::one())?;
    }
    Ok(dx)
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn causal_attention<T: Real>(
    cfg: &ModelConfig,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (n, d) = (q.rows(), q.cols());
    let dh = cfg.head_dim();
    let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d]);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let off = h * dh;
        let mut p = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let qi = &q.row(i)[off..off + dh];
            let prow = &mut p.row_mut(i)[..=i];
            for (j, s) in prow.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + dh];
                let mut acc = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *s = acc * inv_sqrt;
            }
            crate::numerics::softmax_in_place(prow);
            let orow = &mut out.row_mut(i)[off..off + dh];
            for (j, &pij) in p.row(i)[..=i].iter().enumerate() {
                let vj = &v.row(j)[off..off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
fn causal_attention_backward<T: Real>(
    cfg: &ModelConfig,
    c: &LayerCache<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (c.q.rows(), c.q.cols());
    let dh = cfg.head_dim();
    let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    let mut dp = vec![T::zero(); n];
    for (h, p) in c.probs.iter().enumerate() {
        let off = h * dh;
        for i in 0..n {
            let doi = &dout.row(i)[off..off + dh];
            let prow = &p.row(i)[..=i];
            // dP_ij = <dO_i, V_j>, dV_j += P_ij dO_i
            for j in 0..=i {
                let vj = &c.v.row(j)[off..off + dh];
                let mut acc = T::zero();
                for (&a, &b) in doi.iter().zip(vj) {
                    acc += a * b;
                }
                dp[j] = acc;
                let pij = prow[j];
                let dvj = &mut dv.row_mut(j)[off..off + dh];
                for (o, &g) in dvj.iter_mut().zip(doi) {
                    *o += pij * g;
                }
            }
            let dot: T = (0..=i).map(|j| dp[j] * prow[j]).sum();
            let qi: Vec<T> = c.q.row(i)[off..off + dh].to_vec();
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot) * inv_sqrt;
                if ds == T::zero() {
                    continue;
                }
                let kj = &c.k.row(j)[off..off + dh];
                let dqi = &mut dq.row_mut(i)[off..off + dh];
                for (o, &kk) in dqi.iter_mut().zip(kj) {
                    *o += ds * kk;
                }
                let dkj = &mut dk.row_mut(j)[off..off + dh];
                for (o, &qq) in dkj.iter_mut().zip(&qi) {
                    *o += ds * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Logits `T × V` for one sequence plus the activations needed by [`backward_into`].
pub fn forward<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_tokens(cfg, tokens)?;
    let n = tokens.len();
    let d = cfg.d_model;
    let eps = T::lit(cfg.ln_eps);
    let tok = w.tensor("tok_emb")?;
    let pos = w.tensor("pos_emb")?;
    let mut x = Tensor::zeros(&[n, d]);
    for (t, &id) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        for ((o, &a), &b) in row.iter_mut().zip(tok.row(id)).zip(pos.row(t)) {
            *o = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let ln = |s: &str| alloc::format!("layers.{l}.{s}");
        let (h1, ln1) = layer_norm_rows_cached(
            &x,
            w.tensor(&ln("ln1.gamma"))?,
            w.tensor(&ln("ln1.beta"))?,
            eps,
        )?;
        let (q, cq) = linear_forward(w, &linear_weight(l, "attn.q"), &h1)?;
        let (k, ck) = linear_forward(w, &linear_weight(l, "attn.k"), &h1)?;
        let (v, cv) = linear_forward(w, &linear_weight(l, "attn.v"), &h1)?;
        let (attn, probs) = causal_attention(cfg, &q, &k, &v);
        let (a, co) = linear_forward(w, &linear_weight(l, "attn.o"), &attn)?;
        x.add_scaled(&a, T::one())?;

        let (h2, ln2) = layer_norm_rows_cached(
            &x,
            w.tensor(&ln("ln2.gamma"))?,
            w.tensor(&ln("ln2.beta"))?,
            eps,
        )?;
        let (up, cu) = linear_forward(w, &linear_weight(l, "mlp.up"), &h2)?;
        let act = up.map(gelu);
        let (m, cd) = linear_forward(w, &linear_weight(l, "mlp.down"), &act)?;
        x.add_scaled(&m, T::one())?;

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h2,
            up,
            act,
            lin: [cq, ck, cv, co, cu, cd],
        });
    }

    let (hf, ln_f) =
        layer_norm_rows_cached(&x, w.tensor("ln_f.gamma")?, w.tensor("ln_f.beta")?, eps)?;
    let logits = matmul_nt(&hf, w.tensor(head_name(cfg))?)?;
    Ok((
        logits,
        ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            ln_f,
            hf,
        },
    ))
}

/// Accumulates gradients of `sum(dlogits ⊙ logits)` into `grads`.
pub fn backward_into<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    dlogits: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<()> {
    let head = head_name(cfg);
    let head_w = w.tensor(head)?;
    if w.trains_base(head) {
        accumulate(grads, head.into(), matmul_tn(dlogits, &cache.hf)?)?;
    }
    let dhf = matmul(dlogits, head_w)?;
    let (mut dx, dg, db) = layer_norm_backward(&cache.ln_f, w.tensor("ln_f.gamma")?, &dhf)?;
    if w.trains_base("ln_f.gamma") {
        accumulate(grads, "ln_f.gamma".into(), dg)?;
    }
    if w.trains_base("ln_f.beta") {
        accumulate(grads, "ln_f.beta".into(), db)?;
    }

    for (l, c) in cache.layers.iter().enumerate().rev() {
        let ln = |s: &str| alloc::format!("layers.{l}.{s}");
        // MLP branch
        let dact = linear_backward(
            w,
            &linear_weight(l, "mlp.down"),
            &c.act,
            &c.lin[5],
            &dx,
            grads,
        )?;
        let mut dup = dact;
        for (g, &u) in dup.data_mut().iter_mut().zip(c.up.data()) {
            *g *= gelu_grad(u);
        }
        let dh2 = linear_backward(
            w,
            &linear_weight(l, "mlp.up"),
            &c.h2,
            &c.lin[4],
            &dup,
            grads,
        )?;
        let (dx2, dg2, db2) = layer_norm_backward(&c.ln2, w.tensor(&ln("ln2.gamma"))?, &dh2)?;
        if w.trains_base(&ln("ln2.gamma")) {
            accumulate(grads, ln("ln2.gamma"), dg2)?;
        }
        if w.trains_base(&ln("ln2.beta")) {
            accumulate(grads, ln("ln2.beta"), db2)?;
        }
        dx.add_scaled(&dx2, T::one())?;

        // attention branch
        let dattn = linear_backward(
            w,
            &linear_weight(l, "attn.o"),
            &c.attn,
            &c.lin[3],
            &dx,
            grads,
        )?;
        let (dq, dk, dv) = causal_attention_backward(cfg, c, &dattn);
        let mut dh1 =
            linear_backward(w, &linear_weight(l, "attn.q"), &c.h1, &c.lin[0], &dq, grads)?;
        dh1.add_scaled(
            &linear_backward(w, &linear_weight(l, "attn.k"), &c.h1, &c.lin[1], &dk, grads)?,
            T::one(),
        )?;
        dh1.add_scaled(
            &linear_backward(w, &linear_weight(l, "attn.v"), &c.h1, &c.lin[2], &dv, grads)?,
            T::one(),
        )?;
        let (dx1, dg1, db1) = layer_norm_backward(&c.ln1, w.tensor(&ln("ln1.gamma"))?, &dh1)?;
        if w.trains_base(&ln("ln1.gamma")) {
            accumulate(grads, ln("ln1.gamma"), dg1)?;
        }
        if w.trains_base(&ln("ln1.beta")) {
            accumulate(grads, ln("ln1.beta"), db1)?;
        }
        dx.add_scaled(&dx1, T::one())?;
    }

    let train_tok = w.trains_base("tok_emb");
    let train_pos = w.trains_base("pos_emb");
    if train_tok {
        let tok = w.tensor("tok_emb")?;
        let mut g = Tensor::zeros(tok.shape());
        for (t, &id) in cache.tokens.iter().enumerate() {
            for (o, &v) in g.row_mut(id).iter_mut().zip(dx.row(t)) {
                *o += v;
            }
        }
        accumulate(grads, "tok_emb".into(), g)?;
    }
    if train_pos {
        let pos = w.tensor("pos_emb")?;
        let mut g = Tensor::zeros(pos.shape());
        for t in 0..cache.tokens.len() {
            g.row_mut(t).copy_from_slice(dx.row(t));
        }
        accumulate(grads, "pos_emb".into(), g)?;
    }
    Ok(())
}

/// Logits for a batch of equal-length sequences, shaped `b × T × V`.
pub fn forward_logits<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    batch: &[&[usize]],
) -> Result<Tensor<T>> {
    let first = batch.first().ok_or(Error::EmptyInput("batch"))?;
    let len = first.len();
    let mut data = Vec::with_capacity(batch.len() * len * cfg.vocab_size);
    for seq in batch {
        if seq.len() != len {
            return Err(Error::Shape(format!(
                "batch mixes sequence lengths {} and {}",
                len,
                seq.len()
            )));
        }
        let (logits, _) = forward(w, cfg, seq)?;
        data.extend_from_slice(logits.data());
    }
    Tensor::new(vec![batch.len(), len, cfg.vocab_size], data)
}

/// Mean response-token cross entropy over a batch, pooled across sequences.
pub fn batch_loss<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    batch: &[Example],
) -> Result<T> {
    let (rows, targets) = pooled_logits(w, cfg, batch, false)?;
    let logits = stack_rows(cfg, &rows.iter().map(|(l, _)| l).collect::<Vec<_>>())?;
    cross_entropy(&logits, &targets, IGNORE_INDEX).map(|(l, _)| l)
}

type Forwarded<T> = Vec<(Tensor<T>, Option<ForwardCache<T>>)>;

fn pooled_logits<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    batch: &[Example],
    keep_cache: bool,
) -> Result<(Forwarded<T>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for ex in batch {
        let (inputs, tg) = ex.inputs_targets();
        let (logits, cache) = forward(w, cfg, inputs)?;
        targets.extend(tg);
        out.push((logits, keep_cache.then_some(cache)));
    }
    Ok((out, targets))
}

fn stack_rows<T: Real>(cfg: &ModelConfig, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let total: usize = parts.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(total * cfg.vocab_size);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![total, cfg.vocab_size], data)
}

/// Loss and gradients for every trainable tensor (and adapter factor) of `w`.
pub fn loss_and_grads<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    batch: &[Example],
) -> Result<(T, Grads<T>)> {
    let (fwd, targets) = pooled_logits(w, cfg, batch, true)?;
    let logits = stack_rows(cfg, &fwd.iter().map(|(l, _)| l).collect::<Vec<_>>())?;
    let (loss, dlogits) = cross_entropy(&logits, &targets, IGNORE_INDEX)?;
    let mut grads = Grads::new();
    let mut start = 0;
    for (l, cache) in &fwd {
        let n = l.rows();
        let cache = cache.as_ref().expect("cache kept");
        backward_into(
            w,
            cfg,
            cache,
            &dlogits.slice_rows(start, start + n),
            &mut grads,
        )?;
        start += n;
    }
    for g in grads.values() {
        if !g.all_finite() {
            return Err(Error::NonFinite("gradients"));
        }
    }
    Ok((loss, grads))
}

/// Keys and values of the positions decoded so far, per layer.
#[derive(Clone, Debug)]
pub struct KvCache<T = f32> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Logits of the next position after appending `token` at position `cache.len()`.
///
/// Performs the same per-row arithmetic as [`forward`], so the returned row is
/// bit-identical to the matching row of the full forward pass.
pub fn forward_step<T: Real, W: Weights<T> + ?Sized>(
    w: &W,
    cfg: &ModelConfig,
    cache: &mut KvCache<T>,
    token: usize,
) -> Result<Vec<T>> {
    let t = cache.len;
    if t >= cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: t + 1,
            max: cfg.max_seq_len,
        });
    }
    if token >= cfg.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab: cfg.vocab_size,
        });
    }
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let eps = T::lit(cfg.ln_eps);
    let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();
    let tok = w.tensor("tok_emb")?;
    let pos = w.tensor("pos_emb")?;
    let mut x = Tensor::zeros(&[1, d]);
    for ((o, &a), &b) in x.data_mut().iter_mut().zip(tok.row(token)).zip(pos.row(t)) {
        *o = a + b;
    }
    for l in 0..cfg.n_layers {
        let ln = |s: &str| alloc::format!("layers.{l}.{s}");
        let (h1, _) = layer_norm_rows_cached(
            &x,
            w.tensor(&ln("ln1.gamma"))?,
            w.tensor(&ln("ln1.beta"))?,
            eps,
        )?;
        let (q, _) = linear_forward(w, &linear_weight(l, "attn.q"), &h1)?;
        let (k, _) = linear_forward(w, &linear_weight(l, "attn.k"), &h1)?;
        let (v, _) = linear_forward(w, &linear_weight(l, "attn.v"), &h1)?;
        cache.keys[l].extend_from_slice(k.data());
        cache.values[l].extend_from_slice(v.data());
        let (keys, values) = (&cache.keys[l], &cache.values[l]);
        let mut attn = Tensor::zeros(&[1, d]);
        let mut p = vec![T::zero(); t + 1];
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let qi = &q.data()[off..off + dh];
            for (j, s) in p.iter_mut().enumerate() {
                let kj = &keys[j * d + off..j * d + off + dh];
                let mut acc = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *s = acc * inv_sqrt;
            }
            crate::numerics::softmax_in_place(&mut p);
            let orow = &mut attn.data_mut()[off..off + dh];
            for (j, &pij) in p.iter().enumerate() {
                let vj = &values[j * d + off..j * d + off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        let (a, _) = linear_forward(w, &linear_weight(l, "attn.o"), &attn)?;
        x.add_scaled(&a, T::one())?;
        let (h2, _) = layer_norm_rows_cached(
            &x,
            w.tensor(&ln("ln2.gamma"))?,
            w.tensor(&ln("ln2.beta"))?,
            eps,
        )?;
        let (up, _) = linear_forward(w, &linear_weight(l, "mlp.up"), &h2)?;
        let (m, _) = linear_forward(w, &linear_weight(l, "mlp.down"), &up.map(gelu))?;
        x.add_scaled(&m, T::one())?;
    }
    cache.len += 1;
    let (hf, _) = layer_norm_rows_cached(&x, w.tensor("ln_f.gamma")?, w.tensor("ln_f.beta")?, eps)?;
    Ok(matmul_nt(&hf, w.tensor(head_name(cfg))?)?.into_data())
}
