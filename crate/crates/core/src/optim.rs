//! SGD with momentum and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Precision;
use crate::params::{ModelParams, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Momentum for SGD, β₁ for AdamW.
    pub momentum: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    /// Transformer default: AdamW, lr 1e-5, weight decay 0.05, β₁ 0.9.
    pub fn adamw_default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-5,
            weight_decay: 0.05,
            momentum: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Convolutional default: SGD, lr 0.03, no weight decay, momentum 0.9.
    pub fn sgd_default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.03,
            weight_decay: 0.0,
            momentum: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("optimizer.{k}"), m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("lr", "must be a non-negative finite number");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter optimizer state bound to one parameter layout.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    precision: Precision,
    slots: Vec<Slot>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, precision: Precision) -> Self {
        Self {
            cfg,
            precision,
            slots: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients currently stored on `params`.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    first: vec![0.0; p.value.len()],
                    second: if self.cfg.kind == OptimizerKind::AdamW {
                        vec![0.0; p.value.len()]
                    } else {
                        Vec::new()
                    },
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::ParamMismatch("optimizer bound to a different layout".into()));
        }
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.momentum.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            if p.kind == ParamKind::Buffer {
                continue;
            }
            if p.grad.len() != p.value.len() {
                return Err(Error::ParamMismatch(format!("missing gradient for `{}`", p.name)));
            }
            let w = p.value.data_mut();
            let g = p.grad.data();
            match c.kind {
                OptimizerKind::Sgd => {
                    for i in 0..w.len() {
                        let v = c.momentum * slot.first[i] + g[i];
                        slot.first[i] = v;
                        w[i] -= c.learning_rate * (v + c.weight_decay * w[i]);
                    }
                }
                OptimizerKind::AdamW => {
                    for i in 0..w.len() {
                        w[i] -= c.learning_rate * c.weight_decay * w[i];
                        let m = c.momentum * slot.first[i] + (1.0 - c.momentum) * g[i];
                        let v = c.beta2 * slot.second[i] + (1.0 - c.beta2) * g[i] * g[i];
                        slot.first[i] = m;
                        slot.second[i] = v;
                        let mhat = m / bias1;
                        let vhat = v / bias2;
                        w[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                    }
                }
            }
            if self.precision == Precision::F32 {
                for v in w.iter_mut() {
                    *v = *v as f32 as f64;
                }
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("optimizer update of `{}`", p.name),
                });
            }
        }
        Ok(())
    }
}
