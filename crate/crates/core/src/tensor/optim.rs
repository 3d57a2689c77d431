use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Namespace for the update rule.
pub struct Adam;

impl Adam {
    /// One bias-corrected Adam update using each parameter's `grad`.
    /// A missing gradient counts as zero. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(params: &mut [Tensor], names: &[String], state: &mut AdamState) -> Result<()> {
        if params.len() != state.first_moment.len() || names.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {} ({} names)",
                state.first_moment.len(),
                params.len(),
                names.len()
            )));
        }
        for ((p, m), name) in params.iter().zip(&state.first_moment).zip(names) {
            if p.numel() != m.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
            if let Some(g) = &p.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient in parameter {name}")));
                }
            }
        }

        state.step += 1;
        let c = state.config;
        let t = state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(state.first_moment.iter_mut())
            .zip(state.second_moment.iter_mut())
        {
            let Some(g) = p.grad.take() else { continue };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}
