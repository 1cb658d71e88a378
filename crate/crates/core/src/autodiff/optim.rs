use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter {index}: shape {param:?} but gradient {grad:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("expected {expected} parameter tensors, got {actual}")]
    Count { expected: usize, actual: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(OptimError::Hyper(format!(
                "decay rates must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(OptimError::Hyper(format!(
                "step size and stabilizer must be positive, got {} and {}",
                self.lr, self.eps
            )));
        }
        Ok(())
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self, OptimError> {
        config.validate()?;
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Ok(Self {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Applies one update in place. Nothing is modified if any shape is off.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(OptimError::Count {
                expected: self.first.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for (index, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(OptimError::Shape {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
