use std::path::Path;

use serde::Serialize;

use super::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::net::{load_checkpoint, VelocityModel};
use crate::rl::{generate, RewardFn};
use crate::rng::{tag, SeedStream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentStats {
    pub name: String,
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
}

impl ComponentStats {
    fn from_values(name: String, weight: f64, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            name,
            weight,
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub steps: usize,
    pub total: ComponentStats,
    pub components: Vec<ComponentStats>,
    /// Fraction of samples nearest to each data mode; empty without modes.
    pub mode_masses: Vec<f64>,
}

/// Reward statistics over `n` ODE samples. With the same `seeds` and sampler
/// the total mean equals the trainer's evaluation.
pub fn eval_report(
    model: &VelocityModel,
    task: &Task,
    n: usize,
    sampler: &SamplerConfig,
    seeds: SeedStream,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::Input("cannot compute statistics of zero samples".into()));
    }
    sampler.validate("eval.sampler")?;
    let prompts = task.prompts();
    let samples = generate(model, &prompts, n, sampler, seeds)?;
    let totals: Vec<f64> = samples.iter().map(|(x, c)| task.reward(x, prompts.get(*c))).collect();
    let components = task
        .components()
        .into_iter()
        .map(|comp| {
            let values: Vec<f64> = samples.iter().map(|(x, _)| task.component_reward(&comp, x)).collect();
            ComponentStats::from_values(comp.name, comp.weight, &values)
        })
        .collect();
    let mut mode_masses = vec![0.0; task.modes().len()];
    for (x, _) in &samples {
        if let Some(m) = task.nearest_mode(x) {
            mode_masses[m] += 1.0 / n as f64;
        }
    }
    Ok(EvalReport {
        n_samples: n,
        steps: sampler.steps,
        total: ComponentStats::from_values("total".into(), 1.0, &totals),
        components,
        mode_masses,
    })
}

/// Loads a checkpoint and evaluates it on the config's task with an ODE
/// sampler of `steps` steps.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, n: usize, steps: usize) -> Result<EvalReport> {
    let (task, _) = cfg.validate()?;
    let model = load_matching(cfg, checkpoint)?;
    eval_report(
        &model,
        &task,
        n,
        &SamplerConfig::ode(steps),
        SeedStream::new(cfg.seed).child(tag::EVAL, 0),
    )
}

pub(super) fn load_matching(cfg: &RunConfig, checkpoint: &Path) -> Result<VelocityModel> {
    let model = load_checkpoint(checkpoint)?;
    if model.arch() != &cfg.arch {
        return Err(Error::Checkpoint(format!(
            "{} holds architecture {:?}, config expects {:?}",
            checkpoint.display(),
            model.arch(),
            cfg.arch
        )));
    }
    Ok(model)
}
