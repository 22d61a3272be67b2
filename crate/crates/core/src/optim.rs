//! Stochastic gradient descent with optional momentum.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Per-stage overrides of `learning_rate`.
    pub stage_learning_rates: [Option<f64>; 3],
    pub momentum: f64,
    /// Epochs for stages 1, 2 and 3.
    pub epochs: [usize; 3],
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            stage_learning_rates: [None; 3],
            momentum: 0.0,
            epochs: [50; 3],
            batch_size: 16,
            seed: 0,
        }
    }
}

impl SgdConfig {
    /// Defaults used by training runs: momentum 0.9.
    pub fn training() -> Self {
        Self { momentum: 0.9, ..Self::default() }
    }

    /// Learning rate of stage `stage` (1-based).
    pub fn learning_rate_for(&self, stage: u8) -> f64 {
        let i = (stage as usize).clamp(1, 3) - 1;
        self.stage_learning_rates[i].unwrap_or(self.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        for lr in std::iter::once(self.learning_rate).chain(self.stage_learning_rates.iter().flatten().copied()) {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `v ← μ·v + g`, `p ← p − lr·v`, with one velocity buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, velocity: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates every parameter whose group is selected. Each must hold a gradient.
    pub fn step(&mut self, store: &mut ParamStore, trainable: impl Fn(ParamGroup) -> bool) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (i, p) in store.iter_mut().enumerate() {
            if !trainable(p.group) {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
            };
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(p.tensor.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }

    /// Velocity buffers by parameter name, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Vec<f64>)> {
        store
            .iter()
            .zip(&self.velocity)
            .filter_map(|(p, v)| v.as_ref().map(|v| (p.name.clone(), v.clone())))
            .collect()
    }

    pub fn import(&mut self, store: &ParamStore, buffers: &[(String, Vec<f64>)]) -> Result<()> {
        self.velocity = vec![None; store.len()];
        for (name, v) in buffers {
            let Some(i) = store.iter().position(|p| &p.name == name) else {
                return Err(Error::Input(format!("velocity for unknown parameter {name}")));
            };
            if v.len() != store.iter().nth(i).unwrap().tensor.numel() {
                return Err(Error::Input(format!("velocity for {name} has the wrong length")));
            }
            self.velocity[i] = Some(v.clone());
        }
        Ok(())
    }
}
