use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Moment tables and step counters for a fixed, ordered parameter list.
///
/// Each parameter keeps its own bias-correction counter so that a parameter
/// frozen for the first steps (the router during warmup) starts its
/// correction from 1 when it is first updated.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub param_steps: Vec<u64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first_moment: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let second_moment = first_moment.clone();
        let param_steps = vec![0; first_moment.len()];
        Self {
            config,
            first_moment,
            second_moment,
            param_steps,
            step: 0,
        }
    }

    /// One AdamW step over the parameters with `trainable[i]` set. Skipped
    /// parameters keep both their values and their moments.
    pub fn step_masked(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[&Matrix],
        trainable: &[bool],
    ) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n || trainable.len() != n {
            return Err(Error::shape(format!(
                "optimizer tracks {n} tensors, got {} params / {} grads / {} flags",
                params.len(),
                grads.len(),
                trainable.len()
            )));
        }
        for i in 0..n {
            if params[i].shape() != grads[i].shape() || params[i].shape() != self.first_moment[i].shape() {
                return Err(Error::shape(format!("tensor {i} shape mismatch")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for i in 0..n {
            if !trainable[i] {
                continue;
            }
            self.param_steps[i] += 1;
            let t = self.param_steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                if weight_decay != 0.0 {
                    p[j] -= lr * weight_decay * p[j];
                }
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            params[i].check_finite()?;
        }
        Ok(())
    }
}

/// One AdamW step over every parameter.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[&Matrix], state: &mut OptimizerState) -> Result<()> {
    let all = vec![true; params.len()];
    state.step_masked(params, grads, &all)
}
