//! First-order optimizers over flat parameter slices.
//!
//! Parameters are passed as an ordered list of mutable slices; optimizer
//! state is keyed by position in that list, so callers must always present
//! the same parameters in the same order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fractions of the total epoch count at which the learning rate is
    /// divided by ten.
    pub lr_milestones: Vec<f64>,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_milestones: vec![0.625, 0.75, 0.875],
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            lr_milestones: Vec::new(),
            ..Self::sgd(learning_rate)
        }
    }

    /// Step-decayed learning rate for `epoch` out of `total`.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let drops = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * total as f64).round())
            .count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update with learning rate `lr`. Weight decay is added to
    /// the gradient (L2 form) for both kinds.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient lists differ in length");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if self.cfg.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");
        self.steps += 1;
        let wd = self.cfg.weight_decay;
        match self.cfg.kind {
            OptimizerKind::SgdMomentum => {
                let mu = self.cfg.momentum;
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for i in 0..p.len() {
                        let gi = g[i] + wd * p[i];
                        v[i] = mu * v[i] + gi;
                        p[i] -= lr * v[i];
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for i in 0..p.len() {
                        let gi = g[i] + wd * p[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
