//! AdamW with decoupled weight decay.
//!
//! The decay multiplies parameters by (1 - lr * lambda) directly instead of
//! being folded into the gradient, so it commutes with the moment updates
//! and vanishes exactly when lr = 0. Applied uniformly to every parameter
//! group.

use crate::encoder::EncoderParams;
use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            problems.push(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            problems.push(format!("adam_epsilon {} must be positive", self.epsilon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }
}

/// First/second moment buffers, one pair per parameter group, in the
/// canonical group order of [`EncoderParams::groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

/// One AdamW update on a single buffer. `step` is the 1-based step count
/// used for bias correction.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    config: &OptimizerConfig,
) {
    let lr = config.learning_rate;
    let (b1, b2) = (config.beta1, config.beta2);
    let bias1 = 1.0 - b1.powi(step as i32);
    let bias2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - lr * config.weight_decay;
    for i in 0..theta.len() {
        theta[i] *= decay;
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, tensor) in params.groups() {
            names.push(name);
            m.push(vec![0.0; tensor.numel()]);
            v.push(vec![0.0; tensor.numel()]);
        }
        OptimizerState { names, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one optimization step. `grads` must align with the canonical
    /// group order; a non-finite gradient aborts naming the group.
    pub fn step(
        &mut self,
        params: &mut EncoderParams,
        grads: &[Vec<f64>],
        config: &OptimizerConfig,
    ) -> Result<()> {
        let mut groups = params.groups_mut();
        if groups.len() != grads.len() || groups.len() != self.names.len() {
            return Err(Error::Bookkeeping {
                reason: format!(
                    "optimizer saw {} gradient groups for {} parameter groups",
                    grads.len(),
                    groups.len()
                ),
            });
        }
        for ((name, tensor), grad) in groups.iter().zip(grads) {
            if tensor.numel() != grad.len() {
                return Err(Error::Bookkeeping {
                    reason: format!(
                        "gradient for {name} has {} values, parameter has {}",
                        grad.len(),
                        tensor.numel()
                    ),
                });
            }
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient for {name}"),
                });
            }
        }
        self.step += 1;
        for (i, (_, tensor)) in groups.iter_mut().enumerate() {
            adamw_update(
                tensor.data_mut(),
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                config,
            );
        }
        Ok(())
    }
}
