use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::{eval_report, load_matching, EvalReport};
use super::{prepare_output_dir, write_json, MetricsSink, RunConfig};
use crate::error::{Error, Result};
use crate::net::save_checkpoint;
use crate::rl::{train_advantageflow, train_grpo_baseline, IterMetrics, ModelTriple};
use crate::rng::{tag, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Advflow,
    Grpo,
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advflow" => Ok(Algo::Advflow),
            "grpo" => Ok(Algo::Grpo),
            other => Err(Error::Input(format!(
                "unknown algorithm `{other}` (expected advflow or grpo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSummary {
    pub algo: Algo,
    pub schedule: String,
    pub iterations: usize,
    pub warnings: Vec<String>,
    pub initial_eval: f64,
    pub final_eval: Option<f64>,
    pub min_quad_coeff: Option<f64>,
    pub max_quad_coeff: Option<f64>,
    pub before: EvalReport,
    pub after: EvalReport,
}

/// Finetunes the checkpoint with the chosen trainer. Writes
/// `learned.ckpt`, `rollout.ckpt`, `metrics.{csv,jsonl}` and
/// `finetune_summary.json`; on a failed iteration the last good learned
/// network goes to `last_good.ckpt` before the error is returned.
pub fn run_finetune(cfg: &RunConfig, algo: Algo, checkpoint: &Path) -> Result<FinetuneSummary> {
    let (task, warnings) = cfg.validate()?;
    let reference = load_matching(cfg, checkpoint)?;
    let dir = &cfg.output_dir;
    prepare_output_dir(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(|e| Error::io(dir, e))?;

    let seeds = SeedStream::new(cfg.seed);
    let eval_seeds = seeds.child(tag::EVAL, 0);
    let train = &cfg.train;
    let n_eval = train.eval_samples.max(1);
    let before = eval_report(&reference, &task, n_eval, &train.eval_sampler, eval_seeds)?;

    let mut triple = ModelTriple::from_reference(reference);
    let prompts = task.prompts();
    let mut sink = MetricsSink::create(dir, "metrics")?;
    let mut write_err = None;
    let mut log = |m: &IterMetrics| {
        if write_err.is_none() {
            write_err = sink.write(m).err();
        }
    };
    let outcome = match algo {
        Algo::Advflow => train_advantageflow(&mut triple, &task, &prompts, train, seeds, &mut log),
        Algo::Grpo => train_grpo_baseline(&mut triple, &task, &prompts, train, seeds, &mut log),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            save_checkpoint(&triple.learned, &dir.join("last_good.ckpt"))?;
            return Err(e);
        }
    };
    if let Some(e) = write_err {
        return Err(e);
    }
    save_checkpoint(&triple.learned, &dir.join("learned.ckpt"))?;
    save_checkpoint(&triple.rollout, &dir.join("rollout.ckpt"))?;

    let after = eval_report(&triple.learned, &task, n_eval, &train.eval_sampler, eval_seeds)?;
    let quad = outcome
        .metrics
        .iter()
        .filter_map(|m| m.min_quad_coeff.zip(m.max_quad_coeff));
    let (min_q, max_q) = quad.fold((None, None), |(lo, hi): (Option<f64>, Option<f64>), (a, b)| {
        (Some(lo.map_or(a, |l| l.min(a))), Some(hi.map_or(b, |h| h.max(b))))
    });
    let summary = FinetuneSummary {
        algo,
        schedule: train.gamma.label(),
        iterations: outcome.metrics.len(),
        warnings,
        initial_eval: outcome.initial_eval,
        final_eval: outcome.final_eval(),
        min_quad_coeff: min_q,
        max_quad_coeff: max_q,
        before,
        after,
    };
    write_json(&dir.join("finetune_summary.json"), &summary)?;
    Ok(summary)
}
