//! Low-rank adapters trained over a frozen (quantized) base.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::params::projection_weights;
use crate::model::{
    lora_a_name, lora_b_name, train_loop, AdapterView, Example, ModelConfig, ParamStore,
    Parameters, TrainConfig, TrainLog, Weights,
};
use crate::numerics::{matmul, Real, Rng, Tensor};
use crate::quant::QuantizedModel;
use crate::{Error, Result};

/// Std of the Gaussian used for `A`.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Weight names to adapt; empty means every projection.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: Vec::new(),
        }
    }
}

impl LoraConfig {
    pub fn resolved_targets(&self, cfg: &ModelConfig) -> Vec<String> {
        if self.targets.is_empty() {
            projection_weights(cfg)
        } else {
            self.targets.clone()
        }
    }
}

/// `ΔW = (alpha / r) · B · A` for one linear weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T = f32> {
    pub target: String,
    /// `r × d_in`
    pub a: Tensor<T>,
    /// `d_out × r`
    pub b: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank() as f64)
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn delta(&self) -> Result<Tensor<T>> {
        Ok(matmul(&self.b, &self.a)?.map(|v| v * self.scale()))
    }

    fn check(&self) -> Result<()> {
        let r = self.a.rows();
        if r == 0 || self.a.rank() != 2 || self.b.rank() != 2 || self.b.cols() != r {
            return Err(Error::Shape(format!(
                "adapter on `{}`: A {:?}, B {:?}",
                self.target,
                self.a.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

pub type Adapters<T> = BTreeMap<String, LoraAdapter<T>>;

/// `A ~ N(0, 0.02²)`, `B = 0`, drawn target by target in the given order.
pub fn init_lora<T: Real>(
    cfg: &ModelConfig,
    targets: &[String],
    rank: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Adapters<T>> {
    if targets.is_empty() {
        return Err(Error::EmptyInput("adapter targets"));
    }
    if rank == 0 || !(alpha > 0.0) {
        return Err(Error::Config(
            "adapter rank and alpha must be positive".into(),
        ));
    }
    let known = projection_weights(cfg);
    let mut out = BTreeMap::new();
    for t in targets {
        if !known.contains(t) {
            return Err(Error::UnknownName(t.clone()));
        }
        let kind = t.split('.').skip(2).take(2).collect::<Vec<_>>().join(".");
        let (d_out, d_in) = crate::model::params::linear_dims(cfg, &kind);
        let a = rng.normal_tensor(&[rank, d_in], 0.0, LORA_INIT_STD);
        let b = Tensor::zeros(&[d_out, rank]);
        out.insert(
            t.clone(),
            LoraAdapter {
                target: t.clone(),
                a,
                b,
                alpha,
            },
        );
    }
    Ok(out)
}

/// Frozen base plus trainable adapters.
///
/// The base is any read-only tensor source: a [`QuantizedModel`] in the
/// pipeline, or plain parameters (e.g. its dequantized f64 copy in tests).
/// Only the adapter factors are exposed as trainable.
#[derive(Debug, Clone)]
pub struct QLoraModel<B, T = f32> {
    pub base: B,
    pub adapters: Adapters<T>,
}

impl<B: Weights<T>, T: Real> QLoraModel<B, T> {
    /// Attaches `adapters`, checking every target exists in the base with matching dims.
    pub fn new(base: B, adapters: Adapters<T>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::EmptyInput("adapters"));
        }
        for (name, ad) in &adapters {
            ad.check()?;
            let w = base.tensor(name)?;
            if w.shape() != [ad.b.rows(), ad.a.cols()] {
                return Err(Error::Shape(format!(
                    "adapter on `{name}` does not match base weight {:?}",
                    w.shape()
                )));
            }
        }
        Ok(Self { base, adapters })
    }

    pub fn num_trainable(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_params).sum()
    }
}

impl<B: Weights<T>, T: Real> Weights<T> for QLoraModel<B, T> {
    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.base.tensor(name)
    }

    fn adapter(&self, weight: &str) -> Option<AdapterView<'_, T>> {
        self.adapters.get(weight).map(|ad| AdapterView {
            a: &ad.a,
            b: &ad.b,
            scale: ad.scale(),
        })
    }

    fn trains_base(&self, _name: &str) -> bool {
        false
    }
}

impl<B, T: Real> ParamStore<T> for QLoraModel<B, T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(w) = name.strip_suffix(".lora_a") {
            self.adapters.get_mut(w).map(|a| &mut a.a)
        } else if let Some(w) = name.strip_suffix(".lora_b") {
            self.adapters.get_mut(w).map(|a| &mut a.b)
        } else {
            None
        }
    }
}

/// Adapter fine-tuning; the base is only ever read.
pub fn train_qlora<B: Weights<T>, T: Real>(
    m: &mut QLoraModel<B, T>,
    cfg: &ModelConfig,
    data: &[Example],
    tc: &TrainConfig,
) -> Result<TrainLog> {
    if m.adapters.is_empty() {
        return Err(Error::EmptyInput("adapters"));
    }
    train_loop(m, cfg, data, tc)
}

/// Base tensors that can be exported as dense parameters.
pub trait DenseBase<T> {
    fn dense_parameters(&self) -> Parameters<T>;
}

impl DenseBase<f32> for QuantizedModel {
    fn dense_parameters(&self) -> Parameters<f32> {
        self.to_parameters()
    }
}

impl<T: Real> DenseBase<T> for Parameters<T> {
    fn dense_parameters(&self) -> Parameters<T> {
        self.clone()
    }
}

/// Dense parameters with every adapted weight replaced by `W + (alpha/r)·B·A`.
pub fn merge_and_export<B: Weights<T> + DenseBase<T>, T: Real>(
    m: &QLoraModel<B, T>,
) -> Result<Parameters<T>> {
    let mut p = m.base.dense_parameters();
    for (name, ad) in &m.adapters {
        let delta = ad.delta()?;
        p.get_mut(name)?.add_scaled(&delta, T::one())?;
    }
    Ok(p)
}

/// Adapter factors under their gradient names (`{weight}.lora_a` / `.lora_b`).
pub fn adapter_tensors<T: Real>(adapters: &Adapters<T>) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    for (name, ad) in adapters {
        out.insert(lora_a_name(name), ad.a.clone());
        out.insert(lora_b_name(name), ad.b.clone());
    }
    out
}

/// Inverse of [`adapter_tensors`].
pub fn adapters_from_tensors<T: Real>(
    tensors: &BTreeMap<String, Tensor<T>>,
    alpha: f64,
) -> Result<Adapters<T>> {
    let mut out = BTreeMap::new();
    for (name, a) in tensors {
        let Some(w) = name.strip_suffix(".lora_a") else {
            if name.ends_with(".lora_b") {
                continue;
            }
            return Err(Error::UnknownName(name.clone()));
        };
        let b = tensors
            .get(&lora_b_name(w))
            .ok_or_else(|| Error::Corrupt(format!("missing `{}`", lora_b_name(w))))?;
        let ad = LoraAdapter {
            target: w.into(),
            a: a.clone(),
            b: b.clone(),
            alpha,
        };
        ad.check()?;
        out.insert(w.into(), ad);
    }
    if out.len() * 2 != tensors.len() {
        return Err(Error::Corrupt("unpaired adapter factor".into()));
    }
    Ok(out)
}
