use serde::{Deserialize, Serialize};

use super::GradVector;
use crate::error::{check_dim, Error, Result};

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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient is refused and
/// leaves both `params` and `state` untouched.
pub fn adam_step(params: &mut [f64], grad: &GradVector, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_dim("gradient", params.len(), grad.len())?;
    check_dim("adam state", params.len(), state.m.len())?;
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient; optimizer step refused".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        let c = AdamConfig::default();
        OptimizerKind::Adam {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr } => lr,
        }
    }
}

/// Stateful optimizer bound to one parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(AdamConfig, AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                Optimizer::Adam(AdamConfig { lr, beta1, beta2, eps }, AdamState::new(n_params))
            }
            OptimizerKind::Sgd { lr } => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &GradVector) -> Result<()> {
        match self {
            Optimizer::Adam(cfg, state) => adam_step(params, grad, state, cfg),
            Optimizer::Sgd { lr } => {
                check_dim("gradient", params.len(), grad.len())?;
                if !grad.is_finite() {
                    return Err(Error::Numeric("non-finite gradient; optimizer step refused".into()));
                }
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p -= *lr * g;
                }
                Ok(())
            }
        }
    }
}
