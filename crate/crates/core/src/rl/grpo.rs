//! Minimal reverse-process policy-gradient baseline.
//!
//! Rollouts use the stochastic sampler, whose steps are Gaussian transitions
//! with tractable log-densities. The learned network ascends a PPO-style
//! clipped surrogate of `A * ratio` summed over steps, with the ratio taken
//! against the rollout network that generated the trajectory. Single epoch,
//! no KL penalty.

use super::train::{collect_rollouts, wants_eval, Clock};
use super::{ema_update, ModelTriple};
use super::{evaluate, IterMetrics, PromptSet, RewardFn, TrainConfig, TrainOutcome};
use crate::error::{check_dim, Error, Result};
use crate::flow::{gaussian_logpdf, sample_sde, sde_mean, SamplerConfig, SamplerMode, StepRecord};
use crate::net::{reduce_batch, GradVector, Optimizer, VelocityModel};
use crate::rng::{normal_vec, tag, SeedStream};

fn check_sampler(sampler: &SamplerConfig) -> Result<()> {
    if sampler.mode != SamplerMode::Sde {
        return Err(Error::config(
            "train.sampler.mode",
            "the GRPO baseline needs the sde sampler",
        ));
    }
    if sampler.sigma_scale <= 0.0 {
        return Err(Error::config(
            "train.sampler.sigma_scale",
            "sigma_scale = 0 makes the transition degenerate; log-probability gradients are undefined",
        ));
    }
    Ok(())
}

/// Clipped-surrogate loss of one trajectory and its gradient w.r.t. the
/// learned parameters, averaged over steps and added into `grad`.
fn trajectory_loss_into(
    model: &VelocityModel,
    records: &[StepRecord],
    advantage: f64,
    c: &[f64],
    sampler: &SamplerConfig,
    clip_range: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let per_step = 1.0 / records.len() as f64;
    let mut loss = 0.0;
    for r in records {
        let old_lp = r
            .logprob
            .ok_or_else(|| Error::Numeric("rollout step has no log-probability".into()))?;
        let trace = model.trace(&r.x, r.t, c)?;
        let (mean, dmean_dv) = sde_mean(sampler, &r.x, trace.output(), r.t);
        let lp = gaussian_logpdf(&r.x_next, &mean, r.std);
        let ratio = (lp - old_lp).exp();
        let clipped = ratio.clamp(1.0 - clip_range, 1.0 + clip_range);
        let unclipped_obj = ratio * advantage;
        let clipped_obj = clipped * advantage;
        loss -= per_step * unclipped_obj.min(clipped_obj);
        // The min picks the clipped branch (zero gradient) only when the
        // ratio has left the trust region in the advantage's direction.
        let active = unclipped_obj <= clipped_obj;
        if active && advantage != 0.0 {
            let var = r.std * r.std;
            let upstream: Vec<f64> = r
                .x_next
                .iter()
                .zip(&mean)
                .map(|(x, m)| -per_step * advantage * ratio * (x - m) / var * dmean_dv)
                .collect();
            trace.accumulate(model, &upstream, grad)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite surrogate loss".into()));
    }
    Ok(loss)
}

/// Mean clipped-surrogate loss and gradient over a batch of SDE
/// trajectories, each paired with its advantage and condition.
pub fn grpo_policy_gradient(
    model: &VelocityModel,
    trajectories: &[(&[StepRecord], f64, &[f64])],
    sampler: &SamplerConfig,
    clip_range: f64,
) -> Result<(f64, GradVector)> {
    check_sampler(sampler)?;
    let n = trajectories.len();
    let (losses, mut grad) = reduce_batch(n, model.param_count(), |i, g| {
        let (records, a, c) = trajectories[i];
        trajectory_loss_into(model, records, a, c, sampler, clip_range, g)
    })?;
    grad.scale(1.0 / n as f64);
    Ok((losses.iter().sum::<f64>() / n as f64, grad))
}

pub fn train_grpo_baseline(
    triple: &mut ModelTriple,
    reward: &dyn RewardFn,
    prompts: &PromptSet,
    cfg: &TrainConfig,
    seeds: SeedStream,
    mut on_iter: impl FnMut(&IterMetrics),
) -> Result<TrainOutcome> {
    check_sampler(&cfg.sampler)?;
    cfg.validate()?;
    triple.validate()?;
    check_dim("prompt condition", triple.learned.arch().cond_dim, prompts.cond_dim())?;

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
    let dim = triple.learned.arch().data_dim;

    for iter in 1..=cfg.iterations {
        let snapshot = triple.clone();
        let step = (|| -> Result<IterMetrics> {
            let rollout_model = &triple.rollout;
            let batch = collect_rollouts(
                cfg,
                prompts,
                reward,
                seeds,
                iter,
                |c, rng| {
                    let x_start = normal_vec(rng, dim);
                    Ok(sample_sde(rollout_model, &x_start, c, &cfg.sampler, rng)?)
                },
                |traj| traj.final_state(),
            )?;
            let k = batch.k();
            let trajectories: Vec<(&[StepRecord], f64, &[f64])> = batch
                .samples
                .iter()
                .enumerate()
                .map(|(idx, traj)| {
                    (
                        traj.records.as_slice(),
                        batch.advantage(idx),
                        prompts.get(batch.prompt_index[idx / k]),
                    )
                })
                .collect();
            let (loss, grad) = grpo_policy_gradient(&triple.learned, &trajectories, &cfg.sampler, cfg.clip_range)?;
            let grad_norm = grad.norm();
            optimizer.step(triple.learned.params_mut(), &grad)?;
            ema_update(&mut triple.rollout, &triple.learned, cfg.rho)?;
            Ok(IterMetrics {
                iter,
                wall_s: 0.0,
                mean_reward: batch.mean_reward(),
                eval_reward: None,
                min_quad_coeff: None,
                max_quad_coeff: None,
                adv_term: loss,
                rollout_term: None,
                ref_term: None,
                grad_norm,
            })
        })();
        let mut m = match step {
            Ok(m) => m,
            Err(e) => {
                *triple = snapshot;
                return Err(Error::Numeric(format!("iteration {iter}: {e}")));
            }
        };
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
    Ok(TrainOutcome { initial_eval, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, ArchSpec};

    fn model(seed: u64) -> VelocityModel {
        let arch = ArchSpec::new(2, 0, vec![8], Activation::Tanh);
        VelocityModel::xavier(arch, &mut SeedStream::new(seed).stream(tag::INIT, 0))
    }

    #[test]
    fn refuses_degenerate_or_deterministic_sampler() {
        let m = model(1);
        assert!(matches!(
            grpo_policy_gradient(&m, &[], &SamplerConfig::sde(10, 0.0), 0.2),
            Err(Error::Config { .. })
        ));
        assert!(grpo_policy_gradient(&m, &[], &SamplerConfig::ode(10), 0.2).is_err());
        let cfg = TrainConfig {
            sampler: SamplerConfig::ode(10),
            ..TrainConfig::default()
        };
        let mut tr = ModelTriple::from_reference(m);
        let r = train_grpo_baseline(
            &mut tr,
            &|x: &[f64], _: &[f64]| x[0],
            &PromptSet::unconditional(),
            &cfg,
            SeedStream::new(0),
            |_| {},
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let m = model(2);
        let sampler = SamplerConfig::sde(6, 0.4);
        let traj = sample_sde(&m, &[0.3, -0.2], &[], &sampler, &mut SeedStream::new(3).stream(0, 0)).unwrap();
        let (loss, g) = grpo_policy_gradient(&m, &[(&traj.records, 0.0, &[])], &sampler, 0.2).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let old = model(3);
        let mut learned = old.clone();
        // Nudge the learned model so ratios differ from 1 but stay unclipped.
        for (i, p) in learned.params_mut().iter_mut().enumerate() {
            *p += 1e-3 * ((i % 7) as f64 - 3.0);
        }
        let sampler = SamplerConfig::sde(5, 0.5);
        let traj = sample_sde(&old, &[0.3, -0.2], &[], &sampler, &mut SeedStream::new(4).stream(0, 0)).unwrap();
        let batch = [(traj.records.as_slice(), 0.7, &[][..])];
        let report = crate::net::grad_check(
            &learned,
            |m| grpo_policy_gradient(m, &batch, &sampler, 0.2).unwrap(),
            1e-5,
        );
        assert!(report.pass, "{report:?}");
    }
}
