use serde::{Deserialize, Serialize};

use super::eval::{eval_report, EvalReport};
use super::{prepare_output_dir, write_json, MetricsSink, PretrainConfig, RunConfig, Task};
use crate::error::{Error, Result};
use crate::flow::{interpolate, prediction_loss_into, sample_time, SamplerConfig};
use crate::net::{reduce_batch, save_checkpoint, ArchSpec, Optimizer, VelocityModel};
use crate::rng::{normal_vec, tag, SeedStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub eval: Option<EvalReport>,
}

/// Trains a freshly initialized network on the clean-prediction loss over
/// task data. Rows are passed to `on_log` every `log_every` steps.
pub fn pretrain_model(
    task: &Task,
    arch: &ArchSpec,
    cfg: &PretrainConfig,
    seeds: SeedStream,
    mut on_log: impl FnMut(&PretrainMetrics) -> Result<()>,
) -> Result<VelocityModel> {
    let mut model = VelocityModel::xavier(arch.clone(), &mut seeds.stream(tag::INIT, 0));
    let mut optimizer = Optimizer::new(cfg.optimizer, model.param_count());
    let dim = arch.data_dim;
    let b = cfg.batch_size;
    for step in 1..=cfg.steps {
        let (losses, mut grad) = reduce_batch(b, model.param_count(), |i, g| {
            let mut rng = seeds.stream(tag::PRETRAIN, ((step as u64) << 32) | i as u64);
            let (x0, c) = task.sample_data(&mut rng);
            let t = sample_time(&mut rng, cfg.t_min);
            let eps = normal_vec(&mut rng, dim);
            prediction_loss_into(&model, &interpolate(&x0, &eps, t)?, &c, g)
        })
        .map_err(|e| Error::Numeric(format!("pretrain step {step}: {e}")))?;
        grad.scale(1.0 / b as f64);
        let loss = losses.iter().sum::<f64>() / b as f64;
        optimizer
            .step(model.params_mut(), &grad)
            .map_err(|e| Error::Numeric(format!("pretrain step {step}: {e}")))?;
        if step % cfg.log_every == 0 || step == cfg.steps {
            on_log(&PretrainMetrics {
                step,
                loss,
                grad_norm: grad.norm(),
            })?;
        }
    }
    Ok(model)
}

/// Pretrains and writes `model.ckpt`, `pretrain_metrics.{csv,jsonl}`,
/// `pretrain_summary.json` and the resolved `config.toml` into the output
/// directory.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    let (task, _) = cfg.validate()?;
    let dir = &cfg.output_dir;
    prepare_output_dir(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(|e| crate::Error::io(dir, e))?;

    let seeds = SeedStream::new(cfg.seed);
    let mut sink = MetricsSink::create(dir, "pretrain_metrics")?;
    let mut final_loss = None;
    let model = pretrain_model(&task, &cfg.arch, &cfg.pretrain, seeds, |row| {
        final_loss = Some(row.loss);
        sink.write(row)
    })?;
    save_checkpoint(&model, &dir.join("model.ckpt"))?;

    let eval = if cfg.pretrain.eval_samples > 0 {
        let sampler = SamplerConfig::ode(cfg.pretrain.eval_steps);
        Some(eval_report(
            &model,
            &task,
            cfg.pretrain.eval_samples,
            &sampler,
            seeds.child(tag::EVAL, 0),
        )?)
    } else {
        None
    };
    let summary = PretrainSummary {
        steps: cfg.pretrain.steps,
        final_loss,
        eval,
    };
    write_json(&dir.join("pretrain_summary.json"), &summary)?;
    Ok(summary)
}
