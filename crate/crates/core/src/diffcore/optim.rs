use super::params::ParamStore;
use crate::error::{Result, SmithError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear learning-rate warmup; 0 disables it. The rate is
    /// constant afterwards.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            warmup_steps: 0,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_multiplier(&self, step: u64) -> f64 {
        match self.config.warmup_steps {
            0 => 1.0,
            w => (step as f64 / w as f64).min(1.0),
        }
    }

    /// Applies one update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(SmithError::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != params.get(id).len() {
                    return Err(SmithError::shape(
                        "adam_step",
                        format!("gradient length mismatch for `{}`", params.name(id)),
                    ));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(SmithError::NonFiniteGradient {
                        name: params.name(id).to_string(),
                    });
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = self.step as i32;
        let lr = lr * self.lr_multiplier(self.step);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, id) in params.ids().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = params.get_mut(id).data_mut();
            match &grads[i] {
                Some(g) => {
                    for j in 0..p.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] *= beta1;
                        v[j] *= beta2;
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
