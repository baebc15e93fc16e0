use serde::{Deserialize, Serialize};

use super::model::Model;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a flat list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model<T: Scalar>(config: AdamConfig, model: &Model<T>) -> Self {
        let sizes: Vec<usize> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.numel())
            .collect();
        Self::new(config, &sizes)
    }

    /// One update of `params` from `grads`, both in the same order as the state.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = (p[j] as f64 - upd) as f32;
            }
        }
    }

    /// Apply one step using the gradients stored in the model.
    pub fn step_model(&mut self, model: &mut Model<f32>) {
        let mut params = model.params_mut();
        let grads: Vec<Vec<f32>> = params.iter().map(|p| p.grad().to_vec()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut data: Vec<&mut [f32]> = params.iter_mut().map(|p| p.data.as_mut_slice()).collect();
        self.update(&mut data, &grad_refs);
    }
}
