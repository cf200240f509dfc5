//! Adam with bias correction.

use std::collections::HashMap;

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::tensor::{Param, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moments<F> {
    first: Vec<F>,
    second: Vec<F>,
}

/// Optimizer state. Moment buffers are keyed by parameter name, so a single
/// instance can drive any subset of a model's parameters.
pub struct AdamState<F> {
    pub config: AdamConfig,
    step_count: u64,
    moments: HashMap<String, Moments<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let ok = config.lr >= 0.0
            && (0.0..1.0).contains(&config.beta1)
            && (0.0..1.0).contains(&config.beta2)
            && config.eps > 0.0
            && config.weight_decay >= 0.0;
        if !ok {
            return Err(config_err!("invalid Adam settings {config:?}"));
        }
        Ok(AdamState {
            config,
            step_count: 0,
            moments: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter in `params`. Every parameter
    /// must hold a gradient.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) -> Result<()> {
        for p in params.iter() {
            let g = p
                .grad()
                .ok_or_else(|| contract_err!("parameter {} has no gradient", p.name()))?;
            if g.shape() != p.value.shape() {
                return Err(dim_err!("gradient shape mismatch for {}", p.name()));
            }
            if let Some(m) = self.moments.get(p.name()) {
                if m.first.len() != p.value.numel() {
                    return Err(dim_err!("moment buffers for {} have the wrong size", p.name()));
                }
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let corr1 = F::of(1.0 - c.beta1.powi(t));
        let corr2 = F::of(1.0 - c.beta2.powi(t));
        let (lr, eps, wd) = (F::of(c.lr), F::of(c.eps), F::of(c.weight_decay));
        for p in params.iter_mut() {
            let n = p.value.numel();
            let m = self.moments.entry(p.name().to_owned()).or_insert_with(|| Moments {
                first: vec![F::zero(); n],
                second: vec![F::zero(); n],
            });
            let grad = p.grad().expect("checked above").data().to_vec();
            let value = p.value.data_mut();
            for i in 0..n {
                let gi = if c.weight_decay > 0.0 { grad[i] + wd * value[i] } else { grad[i] };
                m.first[i] = b1 * m.first[i] + one_b1 * gi;
                m.second[i] = b2 * m.second[i] + one_b2 * gi * gi;
                let mhat = m.first[i] / corr1;
                let vhat = m.second[i] / corr2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
