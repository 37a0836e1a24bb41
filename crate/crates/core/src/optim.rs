//! Adam optimizer over named parameter tensors.

use std::collections::HashMap;

use crate::error::{GecaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// they can round-trip through checkpoints.
pub struct Adam {
    pub cfg: AdamConfig,
    pub step_count: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update across all parameters. `updates` pairs each named
    /// parameter with its gradient; the step counter advances once per call.
    pub fn step(&mut self, updates: Vec<(&str, &mut Tensor, &[f32])>) -> Result<()> {
        for (name, _, grad) in &updates {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(GecaError::Training(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
        for (name, param, grad) in updates {
            if param.numel() != grad.len() {
                return Err(GecaError::Dimension(format!(
                    "gradient length {} vs parameter {} for {name}",
                    grad.len(),
                    param.numel()
                )));
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let (b1, b2, lr, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.lr, self.cfg.eps);
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                param.data[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            let m = &self.m[name];
            let v = &self.v[name];
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(vec![m.len()], m.clone()).unwrap(),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(vec![v.len()], v.clone()).unwrap(),
            ));
        }
        out
    }

    pub fn import_state(&mut self, step_count: u64, tensors: &[(String, Tensor)]) {
        self.step_count = step_count;
        for (name, tensor) in tensors {
            if let Some(param) = name.strip_prefix("adam.m.") {
                self.m.insert(param.to_string(), tensor.data.clone());
            } else if let Some(param) = name.strip_prefix("adam.v.") {
                self.v.insert(param.to_string(), tensor.data.clone());
            }
        }
    }
}
