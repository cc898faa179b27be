//! Adam with bias correction, and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::{ParamGrads, ParamStore};
use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
}

impl Default for ReduceLrOnPlateau {
    fn default() -> Self {
        Self {
            factor: 0.9,
            patience: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
    learning_rate: f64,
    best_metric: f64,
    bad_calls: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(DmpsError::config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Ok(Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            learning_rate,
            best_metric: f64::INFINITY,
            bad_calls: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best_metric(&self) -> f64 {
        self.best_metric
    }
}

impl Adam {
    /// One bias-corrected Adam update of every parameter at the state's
    /// current learning rate.
    pub fn step(&self, params: &mut ParamStore, grads: &ParamGrads, state: &mut OptimizerState) -> Result<()> {
        if grads.len() != params.len() || state.first_moment.len() != params.len() {
            return Err(DmpsError::contract(format!(
                "gradient/parameter count mismatch: {} grads, {} params",
                grads.len(),
                params.len()
            )));
        }
        for slot in 0..params.len() {
            if grads.get(slot).is_none() {
                return Err(DmpsError::contract(format!(
                    "missing gradient for parameter {}",
                    params.name(slot)
                )));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = state.learning_rate;
        for slot in 0..params.len() {
            let g = grads.get(slot).expect("checked above");
            let m = &mut state.first_moment[slot];
            let v = &mut state.second_moment[slot];
            let p = params.value_mut(slot);
            if g.shape() != p.shape() {
                return Err(DmpsError::Dimension {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl ReduceLrOnPlateau {
    /// Feeds one monitored metric (lower is better). Returns `true` when the
    /// learning rate was reduced.
    pub fn observe(&self, state: &mut OptimizerState, metric: f64) -> bool {
        if metric < state.best_metric {
            state.best_metric = metric;
            state.bad_calls = 0;
            return false;
        }
        state.bad_calls += 1;
        if state.bad_calls > self.patience {
            state.learning_rate *= self.factor;
            state.bad_calls = 0;
            return true;
        }
        false
    }
}
