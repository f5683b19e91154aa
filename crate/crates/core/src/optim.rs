//! First-order optimisers and a halve-on-plateau learning-rate schedule.

// Unused whenever std is linked, which then supplies the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
    /// Epochs without validation improvement before the step size halves.
    pub plateau_patience: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.9 },
            learning_rate: 0.05,
            clip_norm: Some(5.0),
            plateau_patience: Some(5),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum {momentum} outside [0, 1)")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    learning_rate: f64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, learning_rate: config.learning_rate, first: Vec::new(), second: Vec::new(), steps: 0 })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn halve(&mut self) {
        self.learning_rate *= 0.5;
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut ParamGrads) -> f64 {
        let norm = match self.config.clip_norm {
            Some(c) => grads.clip_global_norm(c),
            None => grads.global_norm(),
        };
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps += 1;
        let lr = self.learning_rate;
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id);
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
                        *v = momentum * *v + g;
                    }
                    p.add_scaled(v, -lr);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    for (m, &g) in m.data_mut().iter_mut().zip(g.data()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                    }
                    let v = self.second[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                    }
                    let c1 = 1.0 - beta1.powf(self.steps as f64);
                    let c2 = 1.0 - beta2.powf(self.steps as f64);
                    let m = self.first[i].as_ref().expect("set above");
                    let v = self.second[i].as_ref().expect("set above");
                    for ((p, &m), &v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}

/// Tracks the best validation score and reports when to halve the step size.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize) -> Self {
        PlateauSchedule { patience, best: f64::NEG_INFINITY, stale: 0 }
    }

    /// Returns true when `patience` consecutive epochs failed to improve.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return true;
        }
        false
    }
}
