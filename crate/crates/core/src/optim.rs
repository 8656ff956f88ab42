//! Adaptive-moment optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::config::OptimizerConfig;
use crate::error::Result;
use crate::nn::ParamStore;

/// First and second moment estimates per parameter, plus the update count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in store.params() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m,
            v,
        })
    }

    /// Applies one bias-corrected update with step size `lr`. Parameters
    /// without a gradient keep their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients carry the forward graph; the moments must not
            let g = &g.detach();
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            *m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?.detach();
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&*m / c1)?;
            let denom = ((&*v / c2)?.sqrt()? + self.eps)?;
            let update = (m_hat.div(&denom)? * lr)?;
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }
}
