//! AdamW with decoupled weight decay.
//!
//! Moments are kept in `f64` regardless of the parameter scalar type.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update of a single tensor at step `t` (1-based).
///
/// The decay `w ← w·(1 − lr·wd)` is applied before the bias-corrected
/// adaptive step.
pub fn adamw_update<T: Scalar>(w: &mut [T], g: &[T], state: &mut Moments, t: u64, cfg: &AdamWConfig) -> Result<()> {
    assert_eq!(w.len(), g.len());
    assert_eq!(state.m.len(), w.len());
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("element {i}")));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for i in 0..w.len() {
        let gi = g[i].to_f64().unwrap_or(f64::NAN);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
        let step = cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        let wi = w[i].to_f64().unwrap_or(f64::NAN) * decay - step;
        w[i] = T::c(wi);
    }
    Ok(())
}

/// Optimizer state for a whole module, keyed by parameter path.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Apply accumulated gradients to every parameter of `module`. No
    /// parameter changes if any gradient is non-finite.
    pub fn step<T: Scalar, M: Module<T> + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let mut bad = None;
        module.visit_params("", &mut |name, p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name);
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let state = &mut self.state;
        let mut result = Ok(());
        module.visit_params_mut("", &mut |name, p| {
            let moments = state.entry(name).or_insert_with(|| Moments::zeros(p.numel()));
            if result.is_ok() {
                result = adamw_update(&mut p.value, &p.grad, moments, t, &cfg);
            }
        });
        result
    }
}
