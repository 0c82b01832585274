//! Experiment orchestration: run configs, toy tasks, and the pretrain /
//! finetune / eval / compare / verify drivers behind the CLI.

mod compare;
mod eval;
mod finetune;
mod pretrain;
pub mod task;
mod verify;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use compare::{compare_runs, load_run, run_compare, CompareSummary, Ratio, RunCurve, ThresholdHit};
pub use eval::{eval_report, run_eval, ComponentStats, EvalReport};
pub use finetune::{run_finetune, Algo, FinetuneSummary};
pub use pretrain::{pretrain_model, run_pretrain, PretrainMetrics, PretrainSummary};
pub use task::{DataSpec, RewardSpec, Task, TaskSpec, WeightedReward};
pub use verify::{run_verify, CheckResult, VerifyOptions};

use crate::error::{Error, Result};
use crate::net::{ArchSpec, OptimizerKind};
use crate::rl::TrainConfig;

/// Environment variable that, when set, replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "ADVFLOW_OUTPUT_DIR";

/// Flow-matching pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub t_min: f64,
    /// Record a metrics row every this many steps (and on the last one).
    pub log_every: usize,
    pub eval_samples: usize,
    pub eval_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            optimizer: OptimizerKind::adam(2e-3),
            t_min: 0.001,
            log_every: 50,
            eval_samples: 2000,
            eval_steps: 40,
        }
    }
}

impl PretrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("pretrain.log_every", "must be at least 1"));
        }
        if self.eval_steps == 0 {
            return Err(Error::config("pretrain.eval_steps", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(Error::config("pretrain.t_min", "must lie in [0, 1)"));
        }
        if !(self.optimizer.lr() > 0.0 && self.optimizer.lr().is_finite()) {
            return Err(Error::config("pretrain.optimizer.lr", "must be finite and positive"));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub arch: ArchSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses TOML; errors carry the path of the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().trim().to_string())
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Reads and validates a config file, applying the output-directory
    /// override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validation. Returns the task and any non-fatal warnings.
    pub fn validate(&self) -> Result<(Task, Vec<String>)> {
        self.arch.validate()?;
        let task = Task::new(self.task.clone())?;
        if task.data_dim() != self.arch.data_dim {
            return Err(Error::config(
                "arch.data_dim",
                format!("task data has dimension {}", task.data_dim()),
            ));
        }
        if task.cond_dim() != self.arch.cond_dim {
            return Err(Error::config(
                "arch.cond_dim",
                format!("task conditions have dimension {}", task.cond_dim()),
            ));
        }
        self.pretrain.validate()?;
        let warnings = self.train.validate()?;
        Ok((task, warnings))
    }
}

/// Creates the output directory and checks that it accepts files.
pub(crate) fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    File::create(&probe).map_err(|e| Error::io(dir, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Append-only CSV + JSON-lines sink for one record type.
pub(crate) struct MetricsSink {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    csv_path: PathBuf,
    jsonl_path: PathBuf,
}

impl MetricsSink {
    pub fn create(dir: &Path, stem: &str) -> Result<Self> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let jsonl_path = dir.join(format!("{stem}.jsonl"));
        let csv = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
        let jsonl = BufWriter::new(File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?);
        Ok(Self {
            csv,
            jsonl,
            csv_path,
            jsonl_path,
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.csv
            .serialize(row)
            .map_err(|e| Error::io(&self.csv_path, e.into()))?;
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))?;
        let line = serde_json::to_string(row).expect("metrics serialize");
        writeln!(self.jsonl, "{line}")
            .and_then(|_| self.jsonl.flush())
            .map_err(|e| Error::io(&self.jsonl_path, e))
    }
}
