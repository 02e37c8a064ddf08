use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` and `lrs` follow the store's parameter order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Tensor], lrs: &[f64]) -> Result<StepStats, TrainError> {
        let n = params.len();
        if grads.len() != n || lrs.len() != n || self.m.len() != n {
            return Err(TrainError::Config(format!(
                "optimizer expects {} tensors, got {} grads and {} rates",
                self.m.len(),
                grads.len(),
                lrs.len()
            )));
        }
        let next = self.step + 1;
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            let name = params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
            return Err(TrainError::NonFiniteGradient { step: next, param: name });
        }
        let norm = global_norm(grads);
        let mut clipped = norm;
        if let Some(c) = self.config.clip_norm {
            if norm > c {
                let s = c / norm;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
                clipped = global_norm(grads);
            }
        }
        self.step = next;
        let AdamWConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            ..
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * wd * *w;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped_norm: clipped,
        })
    }
}
