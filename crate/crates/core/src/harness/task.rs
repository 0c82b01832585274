//! Toy data generators and rewards.

use std::f64::consts::TAU;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::{PromptSet, RewardFn};
use crate::rng::{normal_vec, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Isotropic Gaussian mixture; two components in the shipped tasks.
    TwoGauss {
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
        #[serde(default = "default_std")]
        std: f64,
    },
    /// Planar ring with Gaussian radial jitter.
    Ring { radius: f64, width: f64 },
    /// `k` planar modes on a circle; the condition is the one-hot mode label.
    LabeledModes {
        k: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_std")]
        std: f64,
    },
}

fn default_std() -> f64 {
    0.5
}

fn default_radius() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// 1 if the nearest data mode is `target`, else 0.
    ModeIndicator {
        target: usize,
    },
    /// `-||x - target||`.
    NegDistance {
        target: Vec<f64>,
    },
    /// 1 if every coordinate has the requested sign (0 = any), else 0.
    Quadrant {
        signs: Vec<i8>,
    },
    WeightedSum {
        components: Vec<WeightedReward>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedReward {
    pub weight: f64,
    #[serde(default)]
    pub name: Option<String>,
    pub reward: RewardSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub data: DataSpec,
    pub reward: RewardSpec,
}

impl DataSpec {
    pub fn data_dim(&self) -> usize {
        match self {
            DataSpec::TwoGauss { means, .. } => means.first().map_or(0, Vec::len),
            DataSpec::Ring { .. } | DataSpec::LabeledModes { .. } => 2,
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            DataSpec::LabeledModes { k, .. } => *k,
            _ => 0,
        }
    }

    /// Centres used for nearest-mode assignment; empty for the ring.
    pub fn modes(&self) -> Vec<Vec<f64>> {
        match self {
            DataSpec::TwoGauss { means, .. } => means.clone(),
            DataSpec::Ring { .. } => Vec::new(),
            DataSpec::LabeledModes { k, radius, .. } => (0..*k)
                .map(|i| {
                    let a = TAU * i as f64 / *k as f64;
                    vec![radius * a.cos(), radius * a.sin()]
                })
                .collect(),
        }
    }

    pub fn prompts(&self) -> PromptSet {
        match self {
            DataSpec::LabeledModes { k, .. } => {
                PromptSet::new((0..*k).map(|i| one_hot(i, *k)).collect()).expect("k >= 1 after validation")
            }
            _ => PromptSet::unconditional(),
        }
    }

    /// One draw of `(x0, c)`.
    pub fn sample(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        match self {
            DataSpec::TwoGauss { means, weights, std } => {
                let total: f64 = weights.iter().sum();
                let u = rng.random_range(0.0..total);
                let mut acc = 0.0;
                let mut idx = means.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                let z = normal_vec(rng, means[idx].len());
                (means[idx].iter().zip(z).map(|(m, z)| m + std * z).collect(), Vec::new())
            }
            DataSpec::Ring { radius, width } => {
                let a = rng.random_range(0.0..TAU);
                let r = radius + width * normal_vec(rng, 1)[0];
                (vec![r * a.cos(), r * a.sin()], Vec::new())
            }
            DataSpec::LabeledModes { k, std, .. } => {
                let label = rng.random_range(0..*k);
                let centre = &self.modes()[label];
                let z = normal_vec(rng, 2);
                (vec![centre[0] + std * z[0], centre[1] + std * z[1]], one_hot(label, *k))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataSpec::TwoGauss { means, weights, std } => {
                if means.is_empty() {
                    return Err(Error::config("task.data.means", "needs at least one mode"));
                }
                let d = means[0].len();
                if d == 0 {
                    return Err(Error::config(
                        "task.data.means[0]",
                        "modes must have at least one coordinate",
                    ));
                }
                for (i, m) in means.iter().enumerate() {
                    if m.len() != d {
                        return Err(Error::config(
                            format!("task.data.means[{i}]"),
                            format!("expected {d} coordinates"),
                        ));
                    }
                    if m.iter().any(|x| !x.is_finite()) {
                        return Err(Error::config(format!("task.data.means[{i}]"), "must be finite"));
                    }
                }
                if weights.len() != means.len() {
                    return Err(Error::config("task.data.weights", "needs one weight per mode"));
                }
                if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::config(
                        format!("task.data.weights[{i}]"),
                        "must be finite and nonnegative",
                    ));
                }
                if weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::config("task.data.weights", "must not all be zero"));
                }
                positive("task.data.std", *std)
            }
            DataSpec::Ring { radius, width } => {
                positive("task.data.radius", *radius)?;
                if !(width.is_finite() && *width >= 0.0) {
                    return Err(Error::config("task.data.width", "must be finite and nonnegative"));
                }
                Ok(())
            }
            DataSpec::LabeledModes { k, radius, std } => {
                if *k == 0 {
                    return Err(Error::config("task.data.k", "must be at least 1"));
                }
                positive("task.data.radius", *radius)?;
                positive("task.data.std", *std)
            }
        }
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(path, "must be finite and positive"))
    }
}

fn one_hot(i: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

impl RewardSpec {
    fn validate(&self, path: &str, data: &DataSpec, nested: bool) -> Result<()> {
        let dim = data.data_dim();
        match self {
            RewardSpec::ModeIndicator { target } => {
                let n = data.modes().len();
                if n == 0 {
                    return Err(Error::config(
                        format!("{path}.kind"),
                        "mode_indicator needs a data generator with modes",
                    ));
                }
                if *target >= n {
                    return Err(Error::config(
                        format!("{path}.target"),
                        format!("must be below the mode count {n}"),
                    ));
                }
            }
            RewardSpec::NegDistance { target } => {
                if target.len() != dim {
                    return Err(Error::config(
                        format!("{path}.target"),
                        format!("expected {dim} coordinates"),
                    ));
                }
                if target.iter().any(|x| !x.is_finite()) {
                    return Err(Error::config(format!("{path}.target"), "must be finite"));
                }
            }
            RewardSpec::Quadrant { signs } => {
                if signs.len() != dim {
                    return Err(Error::config(
                        format!("{path}.signs"),
                        format!("expected {dim} entries"),
                    ));
                }
                if let Some(i) = signs.iter().position(|s| !(-1..=1).contains(s)) {
                    return Err(Error::config(format!("{path}.signs[{i}]"), "must be -1, 0 or 1"));
                }
            }
            RewardSpec::WeightedSum { components } => {
                if nested {
                    return Err(Error::config(format!("{path}.kind"), "weighted_sum cannot be nested"));
                }
                if components.is_empty() {
                    return Err(Error::config(
                        format!("{path}.components"),
                        "needs at least one component",
                    ));
                }
                for (i, c) in components.iter().enumerate() {
                    let p = format!("{path}.components[{i}]");
                    if !c.weight.is_finite() {
                        return Err(Error::config(format!("{p}.weight"), "must be finite"));
                    }
                    c.reward.validate(&format!("{p}.reward"), data, true)?;
                }
            }
        }
        Ok(())
    }

    fn label(&self) -> String {
        match self {
            RewardSpec::ModeIndicator { target } => format!("mode_indicator({target})"),
            RewardSpec::NegDistance { .. } => "neg_distance".into(),
            RewardSpec::Quadrant { signs } => format!("quadrant({signs:?})"),
            RewardSpec::WeightedSum { .. } => "weighted_sum".into(),
        }
    }
}

/// One named reward term and its weight in the total.
#[derive(Debug, Clone)]
pub struct RewardComponent {
    pub name: String,
    pub weight: f64,
    spec: RewardSpec,
}

/// A validated task: data generator plus reward, with the mode centres
/// resolved.
#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    modes: Vec<Vec<f64>>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.data.validate()?;
        spec.reward.validate("task.reward", &spec.data, false)?;
        let modes = spec.data.modes();
        Ok(Self { spec, modes })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data.data_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.spec.data.cond_dim()
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn prompts(&self) -> PromptSet {
        self.spec.data.prompts()
    }

    pub fn sample_data(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        self.spec.data.sample(rng)
    }

    /// Index of the closest mode centre, if the generator has modes.
    pub fn nearest_mode(&self, x: &[f64]) -> Option<usize> {
        nearest(&self.modes, x)
    }

    /// The terms reported separately; a non-composite reward is its own
    /// single component with weight 1.
    pub fn components(&self) -> Vec<RewardComponent> {
        match &self.spec.reward {
            RewardSpec::WeightedSum { components } => components
                .iter()
                .enumerate()
                .map(|(i, c)| RewardComponent {
                    name: c.name.clone().unwrap_or_else(|| format!("{}#{i}", c.reward.label())),
                    weight: c.weight,
                    spec: c.reward.clone(),
                })
                .collect(),
            other => vec![RewardComponent {
                name: other.label(),
                weight: 1.0,
                spec: other.clone(),
            }],
        }
    }

    pub fn component_reward(&self, component: &RewardComponent, x: &[f64]) -> f64 {
        self.eval_spec(&component.spec, x)
    }

    fn eval_spec(&self, spec: &RewardSpec, x: &[f64]) -> f64 {
        match spec {
            RewardSpec::ModeIndicator { target } => f64::from(u8::from(nearest(&self.modes, x) == Some(*target))),
            RewardSpec::NegDistance { target } => {
                -x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }
            RewardSpec::Quadrant { signs } => {
                let inside = x.iter().zip(signs).all(|(v, &s)| s == 0 || v * f64::from(s) > 0.0);
                f64::from(u8::from(inside))
            }
            RewardSpec::WeightedSum { components } => {
                components.iter().map(|c| c.weight * self.eval_spec(&c.reward, x)).sum()
            }
        }
    }
}

impl RewardFn for Task {
    fn reward(&self, x: &[f64], _c: &[f64]) -> f64 {
        self.eval_spec(&self.spec.reward, x)
    }
}

fn nearest(modes: &[Vec<f64>], x: &[f64]) -> Option<usize> {
    modes
        .iter()
        .map(|m| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}
