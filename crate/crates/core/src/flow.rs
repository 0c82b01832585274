//! Rectified-flow primitives: the linear interpolant, velocity and
//! clean-prediction losses, and Euler samplers for the probability-flow ODE
//! and its stochastic counterpart.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::net::{GradVector, VelocityModel};
use crate::rng::{normal_vec, Rng};

/// `xt = (1 - t) x0 + t eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolant {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
}

impl Interpolant {
    /// Ground-truth velocity `eps - x0`.
    pub fn velocity_target(&self) -> Vec<f64> {
        self.eps.iter().zip(&self.x0).map(|(e, x)| e - x).collect()
    }
}

pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Interpolant> {
    check_dim("noise", x0.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("time {t} outside [0, 1]")));
    }
    let xt = x0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect();
    Ok(Interpolant {
        x0: x0.to_vec(),
        eps: eps.to_vec(),
        t,
        xt,
    })
}

/// Draws a training time uniformly from `[t_min, 1]`.
pub fn sample_time(rng: &mut Rng, t_min: f64) -> f64 {
    rng.random_range(t_min..=1.0)
}

/// `f(xt, t, c) = xt - t v(xt, t, c)`.
pub fn predict_clean(model: &VelocityModel, xt: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>> {
    let v = model.forward(xt, t, c)?;
    Ok(clean_from_velocity(xt, t, &v))
}

pub(crate) fn clean_from_velocity(xt: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    xt.iter().zip(v).map(|(x, v)| x - t * v).collect()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `||v(xt) - (eps - x0)||^2`, gradient added into `grad`.
pub fn flow_matching_loss_into(model: &VelocityModel, s: &Interpolant, c: &[f64], grad: &mut [f64]) -> Result<f64> {
    let trace = model.trace(&s.xt, s.t, c)?;
    let resid: Vec<f64> = trace
        .output()
        .iter()
        .zip(s.eps.iter().zip(&s.x0))
        .map(|(v, (e, x))| v - (e - x))
        .collect();
    let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
    trace.accumulate(model, &upstream, grad)?;
    Ok(resid.iter().map(|r| r * r).sum())
}

/// `||f(xt) - x0||^2`, gradient added into `grad`.
pub fn prediction_loss_into(model: &VelocityModel, s: &Interpolant, c: &[f64], grad: &mut [f64]) -> Result<f64> {
    let trace = model.trace(&s.xt, s.t, c)?;
    let f = clean_from_velocity(&s.xt, s.t, trace.output());
    let resid: Vec<f64> = f.iter().zip(&s.x0).map(|(f, x)| f - x).collect();
    // df/dv = -t
    let upstream: Vec<f64> = resid.iter().map(|r| -2.0 * s.t * r).collect();
    trace.accumulate(model, &upstream, grad)?;
    Ok(resid.iter().map(|r| r * r).sum())
}

pub fn flow_matching_loss(
    model: &VelocityModel,
    x0: &[f64],
    eps: &[f64],
    t: f64,
    c: &[f64],
) -> Result<(f64, GradVector)> {
    let s = interpolate(x0, eps, t)?;
    let mut g = GradVector::zeros(model.param_count());
    let l = flow_matching_loss_into(model, &s, c, &mut g.0)?;
    Ok((l, g))
}

pub fn prediction_loss(model: &VelocityModel, x0: &[f64], eps: &[f64], t: f64, c: &[f64]) -> Result<(f64, GradVector)> {
    let s = interpolate(x0, eps, t)?;
    let mut g = GradVector::zeros(model.param_count());
    let l = prediction_loss_into(model, &s, c, &mut g.0)?;
    Ok((l, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    #[default]
    Ode,
    Sde,
}

/// Euler sampler settings. `sigma_scale` is `a` in `sigma_t = a sqrt(t)`;
/// `t_floor` bounds the time in the `sigma_t^2 / 2t` drift correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    #[serde(default)]
    pub mode: SamplerMode,
    #[serde(default = "default_sigma_scale")]
    pub sigma_scale: f64,
    /// Defaults to half a step when absent.
    #[serde(default)]
    pub t_floor: Option<f64>,
}

fn default_sigma_scale() -> f64 {
    0.3
}

impl SamplerConfig {
    pub fn ode(steps: usize) -> Self {
        Self {
            steps,
            mode: SamplerMode::Ode,
            sigma_scale: default_sigma_scale(),
            t_floor: None,
        }
    }

    pub fn sde(steps: usize, sigma_scale: f64) -> Self {
        Self {
            steps,
            mode: SamplerMode::Sde,
            sigma_scale,
            t_floor: None,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn t_floor(&self) -> f64 {
        self.t_floor.unwrap_or(0.5 * self.dt())
    }

    /// Time at the start of Euler step `j` (counting down from 1).
    pub fn time(&self, j: usize) -> f64 {
        (self.steps - j) as f64 / self.steps as f64
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config(format!("{path}.steps"), "must be at least 1"));
        }
        if !(self.sigma_scale >= 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::config(
                format!("{path}.sigma_scale"),
                "must be finite and nonnegative",
            ));
        }
        if self.mode == SamplerMode::Sde && self.t_floor() <= 0.0 {
            return Err(Error::config(
                format!("{path}.t_floor"),
                "must be positive for the sde sampler",
            ));
        }
        Ok(())
    }

    /// `sigma_t` and the drift coefficient `sigma_t^2 / (2 max(t, t_floor))`.
    pub fn sde_coefficients(&self, t: f64) -> (f64, f64) {
        let sigma = self.sigma_scale * t.sqrt();
        let k = sigma * sigma / (2.0 * t.max(self.t_floor()));
        (sigma, k)
    }
}

/// One Gaussian transition of the stochastic sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    pub x_next: Vec<f64>,
    /// Log-density of `x_next`; absent when the transition is degenerate.
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Times `1, 1 - dt, ..., 0`.
    pub times: Vec<f64>,
    /// States `x_1 ... x_0`, one more than the number of steps.
    pub states: Vec<Vec<f64>>,
    /// Velocity evaluated at each step.
    pub velocities: Vec<Vec<f64>>,
    /// Transition records; empty for the ODE sampler.
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least the start state")
    }

    /// One JSON object per step: `{t, x, v, mean?, std?, logprob?}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (j, v) in self.velocities.iter().enumerate() {
            let mut rec = serde_json::json!({
                "t": self.times[j],
                "x": self.states[j],
                "v": v,
            });
            if let Some(r) = self.records.get(j) {
                rec["mean"] = serde_json::json!(r.mean);
                rec["std"] = serde_json::json!(r.std);
                rec["logprob"] = serde_json::json!(r.logprob);
            }
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite state at sampler step {step}")))
    }
}

/// Euler integration of `dx/dt = v` from `t = 1` to `t = 0`.
pub fn sample_ode(model: &VelocityModel, x_start: &[f64], c: &[f64], cfg: &SamplerConfig) -> Result<Trajectory> {
    cfg.validate("sampler")?;
    if cfg.mode != SamplerMode::Ode {
        return Err(Error::config("sampler.mode", "sample_ode requires mode = ode"));
    }
    let dt = cfg.dt();
    let mut x = x_start.to_vec();
    let mut traj = Trajectory {
        times: vec![1.0],
        states: vec![x.clone()],
        velocities: Vec::with_capacity(cfg.steps),
        records: Vec::new(),
    };
    for j in 0..cfg.steps {
        let t = cfg.time(j);
        let v = model.forward(&x, t, c)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= vi * dt;
        }
        check_finite(&x, j)?;
        traj.velocities.push(v);
        traj.times.push(cfg.time(j + 1));
        traj.states.push(x.clone());
    }
    Ok(traj)
}

/// Log-density of an isotropic Gaussian `N(mean, std^2 I)` at `x`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let d = x.len() as f64;
    let q: f64 = x.iter().zip(mean).map(|(a, m)| ((a - m) / std).powi(2)).sum();
    -0.5 * q - d * std.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// Mean of the stochastic transition at `(x, t)` given velocity `v`, plus
/// the scalar `d mean / d v` shared by every coordinate.
pub fn sde_mean(cfg: &SamplerConfig, x: &[f64], v: &[f64], t: f64) -> (Vec<f64>, f64) {
    let dt = cfg.dt();
    let (_, k) = cfg.sde_coefficients(t);
    let mean = if k == 0.0 {
        x.iter().zip(v).map(|(x, v)| x - v * dt).collect()
    } else {
        x.iter()
            .zip(v)
            .map(|(x, v)| {
                let x1_hat = x + (1.0 - t) * v;
                x - (v - k * x1_hat) * dt
            })
            .collect()
    };
    (mean, -dt * (1.0 - k * (1.0 - t)))
}

/// Euler-Maruyama sampler:
/// `x' = x - [v - sigma_t^2/(2t) x1_hat] dt + sigma_t sqrt(dt) xi`,
/// `x1_hat = x + (1 - t) v`.
pub fn sample_sde(
    model: &VelocityModel,
    x_start: &[f64],
    c: &[f64],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    cfg.validate("sampler")?;
    if cfg.mode != SamplerMode::Sde {
        return Err(Error::config("sampler.mode", "sample_sde requires mode = sde"));
    }
    let dt = cfg.dt();
    let mut x = x_start.to_vec();
    let mut traj = Trajectory {
        times: vec![1.0],
        states: vec![x.clone()],
        velocities: Vec::with_capacity(cfg.steps),
        records: Vec::with_capacity(cfg.steps),
    };
    for j in 0..cfg.steps {
        let t = cfg.time(j);
        let v = model.forward(&x, t, c)?;
        let (mean, _) = sde_mean(cfg, &x, &v, t);
        let (sigma, _) = cfg.sde_coefficients(t);
        let std = sigma * dt.sqrt();
        let x_next: Vec<f64> = if std > 0.0 {
            let xi = normal_vec(rng, x.len());
            mean.iter().zip(&xi).map(|(m, z)| m + std * z).collect()
        } else {
            mean.clone()
        };
        check_finite(&x_next, j)?;
        let logprob = (std > 0.0).then(|| gaussian_logpdf(&x_next, &mean, std));
        traj.records.push(StepRecord {
            t,
            x: std::mem::replace(&mut x, x_next.clone()),
            mean,
            std,
            x_next,
            logprob,
        });
        traj.velocities.push(v);
        traj.times.push(cfg.time(j + 1));
        traj.states.push(x.clone());
    }
    Ok(traj)
}
