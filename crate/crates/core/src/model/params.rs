use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::numerics::{Real, Rng, Tensor};
use crate::{Error, Result};

/// The projections inside one transformer block, in canonical order.
pub const LINEAR_KINDS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];

pub fn layer_name(layer: usize, what: &str) -> String {
    format!("layers.{layer}.{what}")
}

pub fn linear_weight(layer: usize, kind: &str) -> String {
    format!("layers.{layer}.{kind}.weight")
}

pub fn linear_bias(layer: usize, kind: &str) -> String {
    format!("layers.{layer}.{kind}.bias")
}

/// Bias tensor name belonging to a linear weight name.
pub fn bias_of(weight: &str) -> Option<String> {
    weight
        .strip_suffix(".weight")
        .map(|stem| format!("{stem}.bias"))
}

/// `(d_out, d_in)` of a linear kind.
pub fn linear_dims(cfg: &ModelConfig, kind: &str) -> (usize, usize) {
    match kind {
        "mlp.up" => (cfg.d_ff, cfg.d_model),
        "mlp.down" => (cfg.d_model, cfg.d_ff),
        _ => (cfg.d_model, cfg.d_model),
    }
}

/// Every attention and MLP projection weight: the tensors stage 2 quantizes.
pub fn projection_weights(cfg: &ModelConfig) -> Vec<String> {
    (0..cfg.n_layers)
        .flat_map(|l| LINEAR_KINDS.iter().map(move |k| linear_weight(l, k)))
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal),
        ("pos_emb".into(), vec![cfg.max_seq_len, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        out.push((layer_name(l, "ln1.gamma"), vec![d], Init::Ones));
        out.push((layer_name(l, "ln1.beta"), vec![d], Init::Zeros));
        for kind in LINEAR_KINDS {
            if kind == "mlp.up" {
                out.push((layer_name(l, "ln2.gamma"), vec![d], Init::Ones));
                out.push((layer_name(l, "ln2.beta"), vec![d], Init::Zeros));
            }
            let (o, i) = linear_dims(cfg, kind);
            out.push((linear_weight(l, kind), vec![o, i], Init::Normal));
            out.push((linear_bias(l, kind), vec![o], Init::Zeros));
        }
    }
    out.push(("ln_f.gamma".into(), vec![d], Init::Ones));
    out.push(("ln_f.beta".into(), vec![d], Init::Zeros));
    if !cfg.tie_embeddings {
        out.push(("head.weight".into(), vec![cfg.vocab_size, d], Init::Normal));
    }
    out
}

/// Named parameter tensors of a dense model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Parameters<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let t = match init {
                Init::Normal => rng.normal_tensor(&shape, 0.0, cfg.init_std),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// Checks every expected name is present exactly once with the right shape.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        for (name, shape, _) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        if expected.len() != self.tensors.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.iter().any(|(n, _, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnknownName(extra));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownName(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownName(name.into()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }
}
