use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{advantageflow_loss_into, compute_advantages, ema_update, GammaSchedule, LossBreakdown, ModelTriple};
use crate::error::{check_dim, Error, Result};
use crate::flow::{interpolate, sample_ode, sample_time, Interpolant, SamplerConfig, SamplerMode};
use crate::net::{reduce_batch, Optimizer, OptimizerKind, VelocityModel};
use crate::rng::{normal_vec, tag, SeedStream};

/// Scalar reward on generated samples.
pub trait RewardFn: Sync {
    fn reward(&self, x: &[f64], c: &[f64]) -> f64;
}

impl<F> RewardFn for F
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    fn reward(&self, x: &[f64], c: &[f64]) -> f64 {
        self(x, c)
    }
}

/// The conditions prompts are drawn from. Unconditional tasks hold a single
/// empty condition.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    conditions: Vec<Vec<f64>>,
}

impl PromptSet {
    pub fn new(conditions: Vec<Vec<f64>>) -> Result<Self> {
        let dim = conditions
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Input("prompt set is empty".into()))?;
        for c in &conditions {
            check_dim("prompt condition", dim, c.len())?;
        }
        Ok(Self { conditions })
    }

    pub fn unconditional() -> Self {
        Self {
            conditions: vec![Vec::new()],
        }
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn cond_dim(&self) -> usize {
        self.conditions[0].len()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.conditions[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Prompts per batch (`L`).
    pub prompts_per_batch: usize,
    /// Samples per prompt (`K`).
    pub samples_per_prompt: usize,
    pub gamma: GammaSchedule,
    pub lambda: f64,
    /// EMA rate of the rollout network.
    pub rho: f64,
    pub iterations: usize,
    /// Optimizer steps per batch; 1 is a single gradient update per iteration.
    pub inner_steps: usize,
    pub sampler: SamplerConfig,
    pub eval_sampler: SamplerConfig,
    pub optimizer: OptimizerKind,
    /// Lower end of the uniform training-time distribution.
    pub t_min: f64,
    pub eval_samples: usize,
    /// Evaluate every this many iterations (and always on the last one).
    pub eval_every: usize,
    /// PPO ratio clip of the GRPO baseline.
    pub clip_range: f64,
    /// When false the `wall_s` metric is written as 0 so metric files are
    /// byte-reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompts_per_batch: 32,
            samples_per_prompt: 4,
            gamma: GammaSchedule::default(),
            lambda: 0.001,
            rho: 0.9,
            iterations: 300,
            inner_steps: 1,
            sampler: SamplerConfig::ode(10),
            eval_sampler: SamplerConfig::ode(40),
            optimizer: OptimizerKind::adam(1e-3),
            t_min: 0.001,
            eval_samples: 1000,
            eval_every: 10,
            clip_range: 0.2,
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    /// Hard errors, plus warnings for settings that are legal but unsafe.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.prompts_per_batch == 0 {
            return Err(Error::config("train.prompts_per_batch", "must be at least 1"));
        }
        if self.samples_per_prompt == 0 {
            return Err(Error::config("train.samples_per_prompt", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("train.rho", "must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be finite and nonnegative"));
        }
        match self.gamma {
            GammaSchedule::Constant { value } if !(value >= 0.0 && value.is_finite()) => {
                return Err(Error::config("train.gamma.value", "must be finite and nonnegative"));
            }
            GammaSchedule::Nft { beta } if !(beta > 0.0 && beta.is_finite()) => {
                return Err(Error::config("train.gamma.beta", "must be positive"));
            }
            _ => {}
        }
        if self.inner_steps == 0 {
            return Err(Error::config("train.inner_steps", "must be at least 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config("train.t_min", "must lie in (0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::config("train.optimizer.lr", "must be positive"));
        }
        self.sampler.validate("train.sampler")?;
        self.eval_sampler.validate("train.eval_sampler")?;
        if self.eval_sampler.mode != SamplerMode::Ode {
            return Err(Error::config(
                "train.eval_sampler.mode",
                "evaluation uses the ode sampler",
            ));
        }
        let mut warnings = Vec::new();
        if !self.gamma.strictly_convex(self.lambda) {
            warnings.push(format!(
                "gamma schedule {} with lambda = {} does not guarantee A + gamma + lambda > 0 for all A in [-1, 1]",
                self.gamma.label(),
                self.lambda
            ));
        }
        if self.inner_steps > 1 {
            warnings.push(format!(
                "inner_steps = {} takes several updates per batch",
                self.inner_steps
            ));
        }
        Ok(warnings)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub wall_s: f64,
    pub mean_reward: f64,
    pub eval_reward: Option<f64>,
    pub min_quad_coeff: Option<f64>,
    pub max_quad_coeff: Option<f64>,
    /// Mean advantage term; for the GRPO baseline the clipped surrogate loss.
    pub adv_term: f64,
    pub rollout_term: Option<f64>,
    pub ref_term: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Eval reward of the learned model before the first update.
    pub initial_eval: f64,
    pub metrics: Vec<IterMetrics>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.eval_reward)
    }
}

/// ODE samples of `model`, sample `i` conditioned on prompt `i mod |prompts|`.
pub fn generate(
    model: &VelocityModel,
    prompts: &PromptSet,
    n: usize,
    sampler: &SamplerConfig,
    seeds: SeedStream,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let dim = model.arch().data_dim;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(tag::EVAL, i as u64);
            let c = i % prompts.len();
            let x_start = normal_vec(&mut rng, dim);
            let traj = sample_ode(model, &x_start, prompts.get(c), sampler)?;
            Ok((traj.final_state().to_vec(), c))
        })
        .collect()
}

/// Mean reward over `n` ODE samples with a fixed noise set.
pub fn evaluate(
    model: &VelocityModel,
    reward: &dyn RewardFn,
    prompts: &PromptSet,
    n: usize,
    sampler: &SamplerConfig,
    seeds: SeedStream,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("evaluation needs at least one sample".into()));
    }
    let samples = generate(model, prompts, n, sampler, seeds)?;
    Ok(samples
        .iter()
        .map(|(x, c)| reward.reward(x, prompts.get(*c)))
        .sum::<f64>()
        / n as f64)
}

/// A scored batch of rollouts: `L` prompt indices with `K` samples each.
pub(crate) struct RolloutBatch<T> {
    pub prompt_index: Vec<usize>,
    /// Row-major over `(i, k)`.
    pub samples: Vec<T>,
    pub rewards: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

impl<T> RolloutBatch<T> {
    pub fn k(&self) -> usize {
        self.rewards[0].len()
    }

    pub fn advantage(&self, idx: usize) -> f64 {
        let k = self.k();
        self.advantages[idx / k][idx % k]
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.samples.len() as f64;
        self.rewards.iter().flatten().sum::<f64>() / n
    }
}

/// Samples prompts, rolls out `K` trajectories per prompt with `rollout` and
/// scores them.
pub(crate) fn collect_rollouts<T, F>(
    cfg: &TrainConfig,
    prompts: &PromptSet,
    reward: &dyn RewardFn,
    seeds: SeedStream,
    iter: usize,
    rollout: F,
    final_state: impl Fn(&T) -> &[f64],
) -> Result<RolloutBatch<T>>
where
    T: Send,
    F: Fn(&[f64], &mut crate::rng::Rng) -> Result<T> + Sync,
{
    let (l, k) = (cfg.prompts_per_batch, cfg.samples_per_prompt);
    let mut prng = seeds.stream(tag::PROMPTS, iter as u64);
    let prompt_index: Vec<usize> = (0..l).map(|_| prng.random_range(0..prompts.len())).collect();
    let samples: Vec<T> = (0..l * k)
        .into_par_iter()
        .map(|idx| {
            let mut rng = seeds.stream(tag::ROLLOUT, ((iter as u64) << 32) | idx as u64);
            rollout(prompts.get(prompt_index[idx / k]), &mut rng)
        })
        .collect::<Result<_>>()?;
    let rewards: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            (0..k)
                .map(|j| reward.reward(final_state(&samples[i * k + j]), prompts.get(prompt_index[i])))
                .collect()
        })
        .collect();
    let advantages = compute_advantages(&rewards)?;
    Ok(RolloutBatch {
        prompt_index,
        samples,
        rewards,
        advantages,
    })
}

pub(crate) struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    pub fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    pub fn seconds(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }
}

pub(crate) fn wants_eval(cfg: &TrainConfig, iter: usize) -> bool {
    iter % cfg.eval_every == 0 || iter == cfg.iterations
}

/// AdvantageFlow training loop.
///
/// Each iteration rolls out `L x K` ODE samples from the rollout network,
/// computes group advantages, draws a fresh `(t, eps)` per sample, takes
/// `inner_steps` optimizer steps on the mean per-sample loss and then moves
/// the rollout network toward the learned one.
///
/// On a numeric failure `triple` is restored to the state at the start of the
/// failing iteration and the error is returned.
pub fn train_advantageflow(
    triple: &mut ModelTriple,
    reward: &dyn RewardFn,
    prompts: &PromptSet,
    cfg: &TrainConfig,
    seeds: SeedStream,
    mut on_iter: impl FnMut(&IterMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    triple.validate()?;
    check_dim("prompt condition", triple.learned.arch().cond_dim, prompts.cond_dim())?;
    if cfg.sampler.mode != SamplerMode::Ode {
        return Err(Error::config(
            "train.sampler.mode",
            "AdvantageFlow rolls out with the ode sampler",
        ));
    }
    let eval_seeds = seeds.child(tag::EVAL, 0);
    let initial_eval = evaluate(
        &triple.learned,
        reward,
        prompts,
        cfg.eval_samples.max(1),
        &cfg.eval_sampler,
        eval_seeds,
    )?;
    let mut optimizer = Optimizer::new(cfg.optimizer, triple.learned.param_count());
    let clock = Clock::new(cfg.wall_clock);
    let mut metrics = Vec::with_capacity(cfg.iterations);

    for iter in 1..=cfg.iterations {
        let snapshot = (triple.clone(), optimizer.clone());
        match advantageflow_iteration(triple, &mut optimizer, reward, prompts, cfg, seeds, iter) {
            Ok((mut m, _)) => {
                if wants_eval(cfg, iter) {
                    m.eval_reward = Some(evaluate(
                        &triple.learned,
                        reward,
                        prompts,
                        cfg.eval_samples.max(1),
                        &cfg.eval_sampler,
                        eval_seeds,
                    )?);
                }
                m.wall_s = clock.seconds();
                on_iter(&m);
                metrics.push(m);
            }
            Err(e) => {
                *triple = snapshot.0;
                return Err(Error::Numeric(format!("iteration {iter}: {e}")));
            }
        }
    }
    Ok(TrainOutcome { initial_eval, metrics })
}

fn advantageflow_iteration(
    triple: &mut ModelTriple,
    optimizer: &mut Optimizer,
    reward: &dyn RewardFn,
    prompts: &PromptSet,
    cfg: &TrainConfig,
    seeds: SeedStream,
    iter: usize,
) -> Result<(IterMetrics, Vec<LossBreakdown>)> {
    let dim = triple.learned.arch().data_dim;
    let rollout_model = &triple.rollout;
    let batch = collect_rollouts(
        cfg,
        prompts,
        reward,
        seeds,
        iter,
        |c, rng| {
            let x_start = normal_vec(rng, dim);
            Ok(sample_ode(rollout_model, &x_start, c, &cfg.sampler)?
                .final_state()
                .to_vec())
        },
        |x: &Vec<f64>| x.as_slice(),
    )?;
    let k = batch.k();
    let n = batch.samples.len();

    let interps: Vec<Interpolant> = batch
        .samples
        .iter()
        .enumerate()
        .map(|(idx, x0)| {
            let mut rng = seeds.stream(tag::NOISE_TIME, ((iter as u64) << 32) | idx as u64);
            let t = sample_time(&mut rng, cfg.t_min);
            let eps = normal_vec(&mut rng, dim);
            interpolate(x0, &eps, t)
        })
        .collect::<Result<_>>()?;

    let mut first_terms = Vec::new();
    let mut grad_norm = 0.0;
    for step in 0..cfg.inner_steps {
        let current: &ModelTriple = triple;
        let (terms, mut grad) = reduce_batch(n, current.learned.param_count(), |idx, g| {
            let s = &interps[idx];
            let a = batch.advantage(idx);
            let c = prompts.get(batch.prompt_index[idx / k]);
            advantageflow_loss_into(
                current,
                cfg.gamma.advantage_weight(a),
                &s.x0,
                &s.xt,
                s.t,
                c,
                cfg.gamma.gamma(a),
                cfg.lambda,
                g,
            )
            .map_err(|e| Error::Numeric(format!("sample {idx}: {e}")))
        })?;
        grad.scale(1.0 / n as f64);
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite batch gradient".into()));
        }
        if step == 0 {
            first_terms = terms;
            grad_norm = grad.norm();
        }
        optimizer.step(triple.learned.params_mut(), &grad)?;
    }
    ema_update(&mut triple.rollout, &triple.learned, cfg.rho)?;

    let mean = |f: fn(&LossBreakdown) -> f64| first_terms.iter().map(f).sum::<f64>() / n as f64;
    let min_q = first_terms.iter().map(|t| t.quad_coeff).fold(f64::INFINITY, f64::min);
    let max_q = first_terms
        .iter()
        .map(|t| t.quad_coeff)
        .fold(f64::NEG_INFINITY, f64::max);
    let metrics = IterMetrics {
        iter,
        wall_s: 0.0,
        mean_reward: batch.mean_reward(),
        eval_reward: None,
        min_quad_coeff: Some(min_q),
        max_quad_coeff: Some(max_q),
        adv_term: mean(|t| t.advantage_term),
        rollout_term: Some(mean(|t| t.rollout_term)),
        ref_term: Some(mean(|t| t.reference_term)),
        grad_norm,
    };
    Ok((metrics, first_terms))
}
