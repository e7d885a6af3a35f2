//! Adam-style optimizer over named parameter tensors, with per-group
//! learning rates selected by name prefix.

use std::collections::BTreeMap;

use crate::numerics::autodiff::Tensor;
use crate::encode::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// (name prefix, learning rate); the longest matching prefix wins.
    pub groups: Vec<(String, f64)>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, groups: Vec::new() }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First and second moment estimates keyed by parameter name. Tensors
/// may grow rows between steps (densification); new entries start with
/// zero moments.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, state: BTreeMap::new() }
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.cfg
            .groups
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, lr)| *lr)
            .unwrap_or(self.cfg.lr)
    }

    /// One update over every parameter with a matching gradient entry.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            assert_eq!(p.data.len(), g.data.len(), "gradient shape mismatch for {}", name);
            let lr = self.lr_for(name);
            let mom = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: Vec::new(), v: Vec::new() });
            if mom.m.len() < p.data.len() {
                mom.m.resize(p.data.len(), 0.0);
                mom.v.resize(p.data.len(), 0.0);
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                mom.m[i] = self.cfg.beta1 * mom.m[i] + (1.0 - self.cfg.beta1) * gi;
                mom.v[i] = self.cfg.beta2 * mom.v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}
