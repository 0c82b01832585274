//! Advantage-weighted forward-process fine-tuning.
//!
//! Per sample the learned predictor `f` minimizes
//!
//! ```text
//! A ||f - x0||^2 + gamma ||f - f_old||^2 + lambda ||f - f_ref||^2
//! ```
//!
//! where `f_old` and `f_ref` are the rollout and reference predictions at the
//! same noisy point. As a function of `f` this is a quadratic with leading
//! coefficient `A + gamma + lambda`, strictly convex whenever that is positive.

mod grpo;
mod train;

pub use grpo::{grpo_policy_gradient, train_grpo_baseline};
pub use train::{evaluate, generate, train_advantageflow, IterMetrics, PromptSet, RewardFn, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flow::{clean_from_velocity, sq_dist, Interpolant};
use crate::net::{GradVector, VelocityModel};

/// Batches whose reward spread falls below this get all-zero advantages.
pub const Z_GUARD: f64 = 1e-8;

/// Learned, rollout (EMA) and reference networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTriple {
    pub learned: VelocityModel,
    pub rollout: VelocityModel,
    pub reference: VelocityModel,
}

impl ModelTriple {
    /// All three start at the pretrained reference.
    pub fn from_reference(reference: VelocityModel) -> Self {
        Self {
            learned: reference.clone(),
            rollout: reference.clone(),
            reference,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learned.arch() != self.rollout.arch() || self.learned.arch() != self.reference.arch() {
            return Err(Error::Input("model triple members have different architectures".into()));
        }
        Ok(())
    }
}

/// Group-standardized, clipped advantages for an `L x K` reward matrix.
///
/// Rows are centered on their own mean and divided by one batch-wide
/// root-mean-square deviation, then clipped to `[-1, 1]`.
pub fn compute_advantages(rewards: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = rewards
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Input("reward matrix has no rows".into()))?;
    if k == 0 {
        return Err(Error::Input("reward groups must hold at least one sample".into()));
    }
    for (i, row) in rewards.iter().enumerate() {
        check_dim("reward group", k, row.len())?;
        if let Some(j) = row.iter().position(|r| !r.is_finite()) {
            return Err(Error::Input(format!("non-finite reward at ({i}, {j})")));
        }
    }
    let deviations: Vec<Vec<f64>> = rewards
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / k as f64;
            row.iter().map(|r| r - mean).collect()
        })
        .collect();
    let n = (rewards.len() * k) as f64;
    let z = (deviations.iter().flatten().map(|d| d * d).sum::<f64>() / n).sqrt();
    if z < Z_GUARD {
        return Ok(vec![vec![0.0; k]; rewards.len()]);
    }
    Ok(deviations
        .into_iter()
        .map(|row| row.into_iter().map(|d| (d / z).clamp(-1.0, 1.0)).collect())
        .collect())
}

/// Rollout-regularization strength as a function of the (clipped) advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSchedule {
    Constant {
        value: f64,
    },
    /// `gamma = 1 - A`, making `A + gamma` identically 1.
    AdaptiveOneMinusA,
    /// `gamma = beta (beta - A)` paired with advantage weight `beta A`.
    Nft {
        beta: f64,
    },
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule::Constant { value: 1.1 }
    }
}

impl GammaSchedule {
    pub fn gamma(&self, advantage: f64) -> f64 {
        match *self {
            GammaSchedule::Constant { value } => value,
            GammaSchedule::AdaptiveOneMinusA => 1.0 - advantage,
            GammaSchedule::Nft { beta } => beta * (beta - advantage),
        }
    }

    /// Weight on the sample term. The NFT schedule scales it by `beta`.
    pub fn advantage_weight(&self, advantage: f64) -> f64 {
        match *self {
            GammaSchedule::Nft { beta } => beta * advantage,
            _ => advantage,
        }
    }

    /// Whether every advantage in `[-1, 1]` gives a positive quadratic
    /// coefficient for the given `lambda`.
    pub fn strictly_convex(&self, lambda: f64) -> bool {
        match *self {
            GammaSchedule::Constant { value } => value + lambda > 1.0,
            GammaSchedule::AdaptiveOneMinusA => 1.0 + lambda > 0.0,
            GammaSchedule::Nft { beta } => beta * beta + lambda > 0.0,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            GammaSchedule::Constant { value } => format!("constant({value})"),
            GammaSchedule::AdaptiveOneMinusA => "adaptive(1-A)".into(),
            GammaSchedule::Nft { beta } => format!("nft(beta={beta})"),
        }
    }
}

pub fn gamma_value(schedule: &GammaSchedule, advantage: f64) -> f64 {
    schedule.gamma(advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub advantage_term: f64,
    pub rollout_term: f64,
    pub reference_term: f64,
    pub total: f64,
    /// `A + gamma + lambda`.
    pub quad_coeff: f64,
}

/// Loss terms and `dL/df` at explicit prediction points.
pub fn advantageflow_terms(
    f: &[f64],
    x0: &[f64],
    f_old: &[f64],
    f_ref: &[f64],
    advantage: f64,
    gamma: f64,
    lambda: f64,
) -> (LossBreakdown, Vec<f64>) {
    let advantage_term = advantage * sq_dist(f, x0);
    let rollout_term = gamma * sq_dist(f, f_old);
    let reference_term = lambda * sq_dist(f, f_ref);
    let grad_f = (0..f.len())
        .map(|i| 2.0 * (advantage * (f[i] - x0[i]) + gamma * (f[i] - f_old[i]) + lambda * (f[i] - f_ref[i])))
        .collect();
    (
        LossBreakdown {
            advantage_term,
            rollout_term,
            reference_term,
            total: advantage_term + rollout_term + reference_term,
            quad_coeff: advantage + gamma + lambda,
        },
        grad_f,
    )
}

/// Per-sample loss with its gradient w.r.t. the learned parameters added into
/// `grad`. Rollout and reference predictions are constants.
#[allow(clippy::too_many_arguments)]
pub fn advantageflow_loss_into(
    triple: &ModelTriple,
    advantage: f64,
    x0: &[f64],
    xt: &[f64],
    t: f64,
    c: &[f64],
    gamma: f64,
    lambda: f64,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    check_dim("clean sample", xt.len(), x0.len())?;
    let trace = triple.learned.trace(xt, t, c)?;
    let f = clean_from_velocity(xt, t, trace.output());
    let f_old = clean_from_velocity(xt, t, &triple.rollout.forward(xt, t, c)?);
    let f_ref = if lambda != 0.0 {
        clean_from_velocity(xt, t, &triple.reference.forward(xt, t, c)?)
    } else {
        f.clone()
    };
    let (terms, grad_f) = advantageflow_terms(&f, x0, &f_old, &f_ref, advantage, gamma, lambda);
    if !terms.total.is_finite() {
        return Err(Error::Numeric("non-finite advantage-weighted loss".into()));
    }
    // f = xt - t v
    let upstream: Vec<f64> = grad_f.iter().map(|g| -t * g).collect();
    trace.accumulate(&triple.learned, &upstream, grad)?;
    Ok(terms)
}

#[allow(clippy::too_many_arguments)]
pub fn advantageflow_loss(
    triple: &ModelTriple,
    advantage: f64,
    x0: &[f64],
    xt: &[f64],
    t: f64,
    c: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(LossBreakdown, GradVector)> {
    let mut g = GradVector::zeros(triple.learned.param_count());
    let terms = advantageflow_loss_into(triple, advantage, x0, xt, t, c, gamma, lambda, &mut g.0)?;
    Ok((terms, g))
}

/// Convenience wrapper taking an [`Interpolant`].
pub fn advantageflow_loss_at(
    triple: &ModelTriple,
    advantage: f64,
    s: &Interpolant,
    c: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(LossBreakdown, GradVector)> {
    advantageflow_loss(triple, advantage, &s.x0, &s.xt, s.t, c, gamma, lambda)
}

/// `rollout <- rho rollout + (1 - rho) learned`.
pub fn ema_update(rollout: &mut VelocityModel, learned: &VelocityModel, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config("train.rho", format!("{rho} is outside [0, 1]")));
    }
    check_dim("ema parameters", rollout.param_count(), learned.param_count())?;
    if rho == 0.0 {
        rollout.params_mut().copy_from_slice(learned.params());
        return Ok(());
    }
    // Written as a step toward `learned` so that equal parameters stay
    // bitwise equal; `rho o + (1 - rho) o` can round away from `o`.
    for (o, &p) in rollout.params_mut().iter_mut().zip(learned.params()) {
        *o += (1.0 - rho) * (p - *o);
    }
    Ok(())
}
