//! AdamW: Adam with bias correction and decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Params;

/// Optimizer hyperparameters. Defaults match the training recipe the model
/// configs are tuned for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state: first/second moment per parameter, keyed by name so the
/// state survives checkpointing.
#[derive(Debug)]
pub struct AdamW {
    pub hp: AdamWParams,
    step: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(hp: AdamWParams) -> Self {
        AdamW {
            hp,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter that received a gradient.
    /// Frozen parameters (requires_grad false) are untouched, as are
    /// trainable ones that sat outside the last backward pass. Per-element
    /// math runs in f64 so the tiny default learning rate is not eaten by
    /// f32 rounding against O(1) weights.
    pub fn step(&mut self, params: &Params) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.hp.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.hp.beta2 as f64).powi(t);
        let (lr, b1, b2) = (self.hp.lr as f64, self.hp.beta1 as f64, self.hp.beta2 as f64);
        let (eps, wd) = (self.hp.eps as f64, self.hp.weight_decay as f64);
        for (name, param) in params.iter() {
            let mut tensor = param.borrow_mut();
            if !tensor.requires_grad {
                continue;
            }
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            let n = grad.len();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            debug_assert_eq!(m.len(), n, "moment shape drifted for {name}");
            for ((w, &g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * g;
                let vn = b2 * *vi as f64 + (1.0 - b2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                let m_hat = mn / bc1;
                let v_hat = vn / bc2;
                let wf = *w as f64;
                *w = (wf - lr * wd * wf - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
            tensor.grad = Some(grad); // hand the buffer back for reuse/zeroing
        }
    }

    /// Moment buffers for checkpointing, ordered by name.
    pub fn export_state(&self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), self.m[n].clone(), self.v[n].clone()))
            .collect()
    }

    pub fn restore_state(hp: AdamWParams, step: u64, state: Vec<(String, Vec<f32>, Vec<f32>)>) -> Self {
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for (name, mi, vi) in state {
            m.insert(name.clone(), mi);
            v.insert(name, vi);
        }
        AdamW { hp, step, m, v }
    }
}
