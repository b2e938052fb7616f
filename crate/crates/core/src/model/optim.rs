use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use super::transformer::Grads;
use super::Parameters;
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

/// Mutable access to trainable tensors by name.
pub trait ParamStore<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

impl<T: Real> ParamStore<T> for Parameters<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name).ok()
    }
}

impl<T: Real> ParamStore<T> for BTreeMap<String, Tensor<T>> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    /// One AdamW update with bias-corrected moments and decoupled weight decay.
    ///
    /// Parameters without a gradient entry are left untouched. All gradients
    /// are validated before anything is modified.
    pub fn adamw_step<P: ParamStore<T> + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &Grads<T>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .param_mut(name)
                .ok_or_else(|| Error::UnknownName(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - libm::pow(c.beta1, t as f64));
        let bc2 = T::lit(1.0 - libm::pow(c.beta2, t as f64));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr_t) = (T::one(), T::lit(c.eps), T::lit(lr));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for (name, g) in grads {
            let p = params.param_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if c.weight_decay != 0.0 {
                    *w *= decay;
                }
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert("w".into(), Tensor::vector(vec![v]));
        m
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = single(0.7);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        let g = single(0.0);
        for _ in 0..5 {
            opt.adamw_step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p["w"].data()[0], 0.7);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.adamw_step(&mut p, &single(1.0), 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p["w"].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let wd = 0.1;
        let lr = 0.01;
        let mut p = single(2.0);
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        });
        opt.adamw_step(&mut p, &single(0.0), lr).unwrap();
        assert!((p["w"].data()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_leaves_params_untouched() {
        let mut p = single(1.0);
        p.insert("u".into(), Tensor::vector(vec![1.0, 2.0]));
        let mut g = single(1.0);
        g.insert("u".into(), Tensor::vector(vec![1.0]));
        let mut opt = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(
            opt.adamw_step(&mut p, &g, 0.1),
            Err(Error::Shape(_))
        ));
        assert_eq!(p["w"].data()[0], 1.0);
        assert_eq!(opt.step, 0);

        let mut stray = single(1.0);
        stray.insert("missing".into(), Tensor::vector(vec![0.0]));
        assert!(matches!(
            opt.adamw_step(&mut single(1.0), &stray, 0.1),
            Err(Error::UnknownName(_))
        ));
    }
}
