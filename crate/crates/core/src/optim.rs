//! Adam with decoupled weight decay and the warmup/exponential schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.05,
            warmup_steps: 3000,
            decay_rate: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.decay_rate) || self.decay_rate == 0.0 {
            return Err(Error::Config("weight_decay must be >= 0 and decay_rate in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.max_grad_norm < 0.0 {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        Ok(())
    }

    /// Learning rate at a zero-based global step within `epoch`.
    pub fn lr_at(&self, step: usize, epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        self.lr * warm * self.decay_rate.powi(epoch as i32)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    moments: Vec<Option<(Matrix, Matrix)>>,
    steps: Vec<u32>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Applies one update to every parameter in `trainable` that received
    /// a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, trainable: &[ParamId], lr: f64) {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
            self.steps.resize(store.len(), 0);
        }
        let c = &self.config;
        let norm = trainable
            .iter()
            .filter_map(|&id| grads.param(id))
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if c.max_grad_norm > 0.0 && norm > c.max_grad_norm { c.max_grad_norm / norm } else { 1.0 };
        for &id in trainable {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            self.steps[id.0] += 1;
            let t = self.steps[id.0] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let decay = store.get(id).decay;
            let p = store.value_mut(id);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                if decay {
                    *pi -= lr * c.weight_decay * *pi;
                }
                *pi -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = OptimizerConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..OptimizerConfig::default()
        };
        assert_eq!(c.lr_at(0, 0), 0.25);
        assert_eq!(c.lr_at(3, 0), 1.0);
        assert!((c.lr_at(10, 2) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::default();
        let id = store.add("x", Matrix::row_vector(vec![3.0, -2.0]), false);
        let mut opt = AdamW::new(OptimizerConfig {
            lr: 0.1,
            warmup_steps: 0,
            ..OptimizerConfig::default()
        });
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let x = g.param(id);
                let sq = g.mul(x, x);
                let loss = g.sum(sq);
                g.backward(loss)
            };
            opt.step(&mut store, &grads, &[id], 0.1);
        }
        assert!(store.value(id).norm() < 1e-2);
    }

    #[test]
    fn decay_only_touches_flagged_params() {
        let mut store = ParamStore::default();
        let a = store.add("a", Matrix::scalar(1.0), true);
        let b = store.add("b", Matrix::scalar(1.0), false);
        let grads = {
            let mut g = Graph::with_params(&store);
            let (x, y) = (g.param(a), g.param(b));
            let s = g.add(x, y);
            let z = g.scale(s, 0.0);
            g.backward(z)
        };
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.5,
            warmup_steps: 0,
            ..OptimizerConfig::default()
        });
        opt.step(&mut store, &grads, &[a, b], 1.0);
        assert_eq!(store.value(a)[(0, 0)], 0.5);
        assert_eq!(store.value(b)[(0, 0)], 1.0);
    }
}
