use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{prepare_output_dir, write_json, RunConfig};
use crate::error::{Error, Result};
use crate::rl::IterMetrics;

/// Metrics of one finished finetune run.
#[derive(Debug, Clone)]
pub struct RunCurve {
    pub label: String,
    pub dir: PathBuf,
    pub metrics: Vec<IterMetrics>,
}

impl RunCurve {
    /// First evaluated iteration whose eval reward is at least `threshold`.
    pub fn first_hit(&self, threshold: f64) -> Option<ThresholdHit> {
        self.metrics
            .iter()
            .find(|m| m.eval_reward.is_some_and(|r| r >= threshold))
            .map(|m| ThresholdHit {
                iter: m.iter,
                wall_s: m.wall_s,
            })
    }

    fn evals(&self) -> impl Iterator<Item = (&IterMetrics, f64)> {
        self.metrics.iter().filter_map(|m| m.eval_reward.map(|r| (m, r)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdHit {
    pub iter: usize,
    pub wall_s: f64,
}

/// A ratio, or the reason it could not be formed.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Ratio {
    Value(f64),
    Missing(String),
}

impl Ratio {
    fn of(a: Option<f64>, b: Option<f64>) -> Self {
        match (a, b) {
            (Some(a), Some(b)) if b > 0.0 => Ratio::Value(a / b),
            (Some(_), Some(_)) => Ratio::Missing("undefined (zero denominator)".into()),
            _ => Ratio::Missing("not reached".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub label: String,
    pub iterations: usize,
    pub final_eval: Option<f64>,
    pub best_eval: Option<f64>,
    pub hit: Option<ThresholdHit>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub threshold: f64,
    pub a: RunEntry,
    pub b: RunEntry,
    /// Time-to-threshold of `a` over that of `b`.
    pub time_ratio: Ratio,
    pub iter_ratio: Ratio,
}

/// Loads `metrics.csv` from a run directory, or from the `output_dir` of a
/// config file.
pub fn load_run(path: &Path) -> Result<RunCurve> {
    let dir = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)?.output_dir
    } else {
        path.to_path_buf()
    };
    let csv_path = dir.join("metrics.csv");
    if !csv_path.is_file() {
        return Err(Error::Input(format!("no metrics found at {}", csv_path.display())));
    }
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    let metrics = reader
        .deserialize()
        .collect::<std::result::Result<Vec<IterMetrics>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
    if metrics.is_empty() {
        return Err(Error::Input(format!("{} has no rows", csv_path.display())));
    }
    Ok(RunCurve {
        label: path.display().to_string(),
        dir,
        metrics,
    })
}

fn entry(run: &RunCurve, threshold: f64) -> RunEntry {
    RunEntry {
        label: run.label.clone(),
        iterations: run.metrics.len(),
        final_eval: run.evals().last().map(|(_, r)| r),
        best_eval: run.evals().map(|(_, r)| r).reduce(f64::max),
        hit: run.first_hit(threshold),
    }
}

pub fn compare_runs(a: &RunCurve, b: &RunCurve, threshold: f64) -> CompareSummary {
    let (ea, eb) = (entry(a, threshold), entry(b, threshold));
    CompareSummary {
        threshold,
        time_ratio: Ratio::of(ea.hit.map(|h| h.wall_s), eb.hit.map(|h| h.wall_s)),
        iter_ratio: Ratio::of(ea.hit.map(|h| h.iter as f64), eb.hit.map(|h| h.iter as f64)),
        a: ea,
        b: eb,
    }
}

#[derive(Serialize, Default)]
struct IterRow {
    iter: usize,
    a_wall_s: Option<f64>,
    a_mean_reward: Option<f64>,
    a_eval_reward: Option<f64>,
    b_wall_s: Option<f64>,
    b_mean_reward: Option<f64>,
    b_eval_reward: Option<f64>,
}

#[derive(Serialize)]
struct TimeRow {
    wall_s: f64,
    a_eval_reward: Option<f64>,
    b_eval_reward: Option<f64>,
}

/// Latest eval reward at or before `time`.
fn eval_at(run: &RunCurve, time: f64) -> Option<f64> {
    run.evals().take_while(|(m, _)| m.wall_s <= time).last().map(|(_, r)| r)
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `compare_by_iter.csv`, `compare_by_time.csv` and
/// `compare_summary.json` into `out_dir`.
pub fn run_compare(a: &Path, b: &Path, threshold: f64, out_dir: &Path) -> Result<CompareSummary> {
    let (ra, rb) = (load_run(a)?, load_run(b)?);
    prepare_output_dir(out_dir)?;

    let mut by_iter: BTreeMap<usize, IterRow> = BTreeMap::new();
    for m in &ra.metrics {
        let row = by_iter.entry(m.iter).or_default();
        (row.a_wall_s, row.a_mean_reward, row.a_eval_reward) = (Some(m.wall_s), Some(m.mean_reward), m.eval_reward);
    }
    for m in &rb.metrics {
        let row = by_iter.entry(m.iter).or_default();
        (row.b_wall_s, row.b_mean_reward, row.b_eval_reward) = (Some(m.wall_s), Some(m.mean_reward), m.eval_reward);
    }
    write_rows(
        &out_dir.join("compare_by_iter.csv"),
        by_iter.into_iter().map(|(iter, row)| IterRow { iter, ..row }),
    )?;

    let mut times: Vec<f64> = ra.evals().chain(rb.evals()).map(|(m, _)| m.wall_s).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    write_rows(
        &out_dir.join("compare_by_time.csv"),
        times.into_iter().map(|t| TimeRow {
            wall_s: t,
            a_eval_reward: eval_at(&ra, t),
            b_eval_reward: eval_at(&rb, t),
        }),
    )?;

    let summary = compare_runs(&ra, &rb, threshold);
    write_json(&out_dir.join("compare_summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(evals: &[(usize, f64, f64)]) -> RunCurve {
        RunCurve {
            label: "x".into(),
            dir: PathBuf::new(),
            metrics: evals
                .iter()
                .map(|&(iter, wall_s, r)| IterMetrics {
                    iter,
                    wall_s,
                    mean_reward: r,
                    eval_reward: Some(r),
                    min_quad_coeff: None,
                    max_quad_coeff: None,
                    adv_term: 0.0,
                    rollout_term: None,
                    ref_term: None,
                    grad_norm: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn ratios() {
        let a = curve(&[(10, 1.0, 0.5), (20, 2.0, 0.85)]);
        let b = curve(&[(10, 2.0, 0.7), (20, 4.0, 0.9)]);
        let s = compare_runs(&a, &b, 0.8);
        assert_eq!(s.time_ratio, Ratio::Value(0.5));
        assert_eq!(s.iter_ratio, Ratio::Value(1.0));
        let never = curve(&[(10, 1.0, 0.1)]);
        let s = compare_runs(&a, &never, 0.8);
        assert_eq!(s.time_ratio, Ratio::Missing("not reached".into()));
        assert_eq!(serde_json::to_value(&s.time_ratio).unwrap(), "not reached");
        assert_eq!(compare_runs(&a, &a, 0.8).time_ratio, Ratio::Value(1.0));
    }

    #[test]
    fn eval_at_steps_forward() {
        let a = curve(&[(10, 1.0, 0.5), (20, 2.0, 0.85)]);
        assert_eq!(eval_at(&a, 0.5), None);
        assert_eq!(eval_at(&a, 1.5), Some(0.5));
        assert_eq!(eval_at(&a, 9.0), Some(0.85));
    }
}
