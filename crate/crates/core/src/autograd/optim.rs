use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::tensor::Tensor;

/// Plain SGD with L2 weight decay, then zeroes the gradients.
pub fn sgd_step(store: &mut ParamStore, lr: f64, weight_decay: f64) {
    for p in store.params_mut() {
        let (value, grad) = p.value_and_grad_mut();
        for (v, g) in value.data_mut().iter_mut().zip(grad.data_mut()) {
            *v -= lr * (*g + weight_decay * *v);
            *g = 0.0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) decay when positive.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction; moment buffers are created on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (value, grad) = p.value_and_grad_mut();
            for (((x, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * *g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * *g * *g;
                if c.weight_decay > 0.0 {
                    *x -= c.lr * c.weight_decay * *x;
                }
                *x -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *g = 0.0;
            }
        }
    }
}
