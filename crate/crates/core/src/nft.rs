//! Negative-aware branch loss in velocity space and its gradient
//! equivalence with the prediction-space advantage-weighted loss.
//!
//! With implicit branches `v+ = (1 - beta) v_old + beta v` and
//! `v- = (1 + beta) v_old - beta v`, the branch loss
//! `r ||v+ - v*||^2 + (1 - r) ||v- - v*||^2` expands to
//! `||e||^2 + beta^2 ||d||^2 + 2 beta A <e, d>` with `d = v - v_old`,
//! `e = v_old - v*` and `A = 2r - 1`. Multiplied by `t^2` it differs from
//! `beta A ||x0 - f||^2 + beta (beta - A) ||f - f_old||^2` only by
//! `t^2 (1 - beta A) ||e||^2`, which does not depend on the learned network.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::flow::{clean_from_velocity, interpolate, sq_dist, Interpolant};
use crate::net::{GradVector, VelocityModel};
use crate::rl::{advantageflow_loss, GammaSchedule, ModelTriple};
use crate::rng::{normal_vec, tag, SeedStream};

#[derive(Debug, Clone, PartialEq)]
pub struct NftBranchInputs {
    pub beta: f64,
    /// Normalized optimality score in `[0, 1]`.
    pub r_norm: f64,
    /// `2 r - 1`.
    pub advantage: f64,
    /// `eps - x0`.
    pub v_target: Vec<f64>,
    pub v_old: Vec<f64>,
    pub v_theta: Vec<f64>,
    /// `v_theta - v_old`.
    pub d: Vec<f64>,
    /// `v_old - v_target`.
    pub e: Vec<f64>,
}

impl NftBranchInputs {
    pub fn new(beta: f64, r_norm: f64, v_target: Vec<f64>, v_old: Vec<f64>, v_theta: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&r_norm) {
            return Err(Error::Input(format!("optimality score {r_norm} outside [0, 1]")));
        }
        check_dim("rollout velocity", v_target.len(), v_old.len())?;
        check_dim("learned velocity", v_target.len(), v_theta.len())?;
        let d = v_theta.iter().zip(&v_old).map(|(a, b)| a - b).collect();
        let e = v_old.iter().zip(&v_target).map(|(a, b)| a - b).collect();
        Ok(Self {
            beta,
            r_norm,
            advantage: 2.0 * r_norm - 1.0,
            v_target,
            v_old,
            v_theta,
            d,
            e,
        })
    }

    pub fn positive_branch(&self) -> Vec<f64> {
        let b = self.beta;
        self.v_old
            .iter()
            .zip(&self.v_theta)
            .map(|(o, v)| (1.0 - b) * o + b * v)
            .collect()
    }

    pub fn negative_branch(&self) -> Vec<f64> {
        let b = self.beta;
        self.v_old
            .iter()
            .zip(&self.v_theta)
            .map(|(o, v)| (1.0 + b) * o - b * v)
            .collect()
    }

    /// `r ||v+ - v*||^2 + (1 - r) ||v- - v*||^2`.
    pub fn loss(&self) -> f64 {
        self.r_norm * sq_dist(&self.positive_branch(), &self.v_target)
            + (1.0 - self.r_norm) * sq_dist(&self.negative_branch(), &self.v_target)
    }

    /// `||e||^2 + beta^2 ||d||^2 + 2 beta A <e, d>`.
    pub fn expanded_loss(&self) -> f64 {
        let ee: f64 = self.e.iter().map(|x| x * x).sum();
        let dd: f64 = self.d.iter().map(|x| x * x).sum();
        let ed: f64 = self.e.iter().zip(&self.d).map(|(a, b)| a * b).sum();
        ee + self.beta * self.beta * dd + 2.0 * self.beta * self.advantage * ed
    }

    /// `dl / dv_theta`.
    fn grad_v(&self) -> Vec<f64> {
        let (b, r) = (self.beta, self.r_norm);
        let plus = self.positive_branch();
        let minus = self.negative_branch();
        (0..self.d.len())
            .map(|i| 2.0 * r * b * (plus[i] - self.v_target[i]) - 2.0 * (1.0 - r) * b * (minus[i] - self.v_target[i]))
            .collect()
    }
}

/// Branch loss at one noisy sample, with its gradient w.r.t. the learned
/// parameters. The rollout velocity is a constant.
pub fn nft_branch_loss(
    triple: &ModelTriple,
    beta: f64,
    r_norm: f64,
    s: &Interpolant,
    c: &[f64],
) -> Result<(f64, NftBranchInputs, GradVector)> {
    let trace = triple.learned.trace(&s.xt, s.t, c)?;
    let v_old = triple.rollout.forward(&s.xt, s.t, c)?;
    let inputs = NftBranchInputs::new(beta, r_norm, s.velocity_target(), v_old, trace.output().to_vec())?;
    let mut grad = GradVector::zeros(triple.learned.param_count());
    trace.accumulate(&triple.learned, &inputs.grad_v(), &mut grad.0)?;
    Ok((inputs.loss(), inputs, grad))
}

/// Prediction-space loss with `A -> beta A`, `gamma = beta (beta - A)`,
/// `lambda = 0`.
pub fn nft_as_advantageflow(
    triple: &ModelTriple,
    beta: f64,
    r_norm: f64,
    s: &Interpolant,
    c: &[f64],
) -> Result<(f64, GradVector)> {
    let schedule = GammaSchedule::Nft { beta };
    let a = 2.0 * r_norm - 1.0;
    let (terms, grad) = advantageflow_loss(
        triple,
        schedule.advantage_weight(a),
        &s.x0,
        &s.xt,
        s.t,
        c,
        schedule.gamma(a),
        0.0,
    )?;
    Ok((terms.total, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivSample {
    pub interp: Interpolant,
    pub cond: Vec<f64>,
    pub r_norm: f64,
}

/// Fresh `(x0, eps, t, c, r)` draws with `t` uniform on `[t_lo, 1]`.
pub fn draw_equiv_samples(
    data_dim: usize,
    cond_dim: usize,
    n: usize,
    t_lo: f64,
    seeds: SeedStream,
) -> Result<Vec<EquivSample>> {
    (0..n)
        .map(|i| {
            let mut rng = seeds.stream(tag::ORACLE, i as u64);
            let x0: Vec<f64> = normal_vec(&mut rng, data_dim).into_iter().map(|x| 1.5 * x).collect();
            let eps = normal_vec(&mut rng, data_dim);
            let t = rng.random_range(t_lo..=1.0);
            let cond = normal_vec(&mut rng, cond_dim);
            let r_norm = rng.random_range(0.0..=1.0);
            Ok(EquivSample {
                interp: interpolate(&x0, &eps, t)?,
                cond,
                r_norm,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub beta: f64,
    pub samples: usize,
    /// Largest `|t^2 grad(branch) - grad(prediction form)|` over samples and
    /// coordinates.
    pub max_grad_abs_diff: f64,
    pub gap_min: f64,
    pub gap_max: f64,
    pub gap_mean: f64,
    /// Largest deviation of the gap from `t^2 (1 - beta A) ||e||^2`.
    pub max_gap_formula_err: f64,
    /// Largest change of the gap after perturbing the learned parameters.
    pub max_gap_drift: f64,
    /// Largest error of the velocity/prediction bridge identities.
    pub max_bridge_err: f64,
    pub pass: bool,
}

pub const GRAD_TOL: f64 = 1e-8;
pub const GAP_TOL: f64 = 1e-10;
pub const BRIDGE_TOL: f64 = 1e-12;

/// Compares the branch loss against its prediction-space counterpart on
/// every sample. The gap's invariance is probed by moving the learned
/// parameters by a seeded Gaussian perturbation of scale `0.1`.
pub fn equivalence_check(
    triple: &ModelTriple,
    beta: f64,
    samples: &[EquivSample],
    seeds: SeedStream,
) -> Result<EquivalenceReport> {
    triple.validate()?;
    let mut perturbed = triple.clone();
    let noise = normal_vec(
        &mut seeds.stream(tag::ORACLE, u64::MAX),
        perturbed.learned.param_count(),
    );
    for (p, z) in perturbed.learned.params_mut().iter_mut().zip(&noise) {
        *p += 0.1 * z;
    }

    let mut report = EquivalenceReport {
        beta,
        samples: samples.len(),
        max_grad_abs_diff: 0.0,
        gap_min: f64::INFINITY,
        gap_max: f64::NEG_INFINITY,
        gap_mean: 0.0,
        max_gap_formula_err: 0.0,
        max_gap_drift: 0.0,
        max_bridge_err: 0.0,
        pass: false,
    };
    for smp in samples {
        let s = &smp.interp;
        let t2 = s.t * s.t;
        let (nft, inputs, mut g_nft) = nft_branch_loss(triple, beta, smp.r_norm, s, &smp.cond)?;
        let (af, g_af) = nft_as_advantageflow(triple, beta, smp.r_norm, s, &smp.cond)?;
        g_nft.scale(t2);
        report.max_grad_abs_diff = report.max_grad_abs_diff.max(g_nft.max_abs_diff(&g_af));

        let gap = t2 * nft - af;
        let ee: f64 = inputs.e.iter().map(|x| x * x).sum();
        let expected_gap = t2 * (1.0 - beta * inputs.advantage) * ee;
        report.max_gap_formula_err = report.max_gap_formula_err.max((gap - expected_gap).abs());
        report.gap_min = report.gap_min.min(gap);
        report.gap_max = report.gap_max.max(gap);
        report.gap_mean += gap / samples.len() as f64;

        let (nft_p, _, _) = nft_branch_loss(&perturbed, beta, smp.r_norm, s, &smp.cond)?;
        let (af_p, _) = nft_as_advantageflow(&perturbed, beta, smp.r_norm, s, &smp.cond)?;
        report.max_gap_drift = report.max_gap_drift.max((t2 * nft_p - af_p - gap).abs());

        report.max_bridge_err = report.max_bridge_err.max(bridge_error(s, &inputs));
    }
    report.pass = report.max_grad_abs_diff <= GRAD_TOL
        && report.max_gap_drift <= GAP_TOL
        && report.max_gap_formula_err <= GAP_TOL
        && report.max_bridge_err <= BRIDGE_TOL;
    Ok(report)
}

/// `| ||x0 - f||^2 - t^2 ||v - v*||^2 |` and
/// `| ||f - f_old||^2 - t^2 ||v - v_old||^2 |`, whichever is larger.
fn bridge_error(s: &Interpolant, inputs: &NftBranchInputs) -> f64 {
    let f = clean_from_velocity(&s.xt, s.t, &inputs.v_theta);
    let f_old = clean_from_velocity(&s.xt, s.t, &inputs.v_old);
    let t2 = s.t * s.t;
    let a = (sq_dist(&s.x0, &f) - t2 * sq_dist(&inputs.v_theta, &inputs.v_target)).abs();
    let b = (sq_dist(&f, &f_old) - t2 * sq_dist(&inputs.v_theta, &inputs.v_old)).abs();
    a.max(b)
}

/// Rollout network for equivalence tests: the learned one plus a seeded
/// offset, so `d != 0`.
pub fn offset_rollout(learned: &VelocityModel, scale: f64, seeds: SeedStream) -> VelocityModel {
    let mut m = learned.clone();
    let noise = normal_vec(&mut seeds.stream(tag::ORACLE, u64::MAX - 1), m.param_count());
    for (p, z) in m.params_mut().iter_mut().zip(&noise) {
        *p += scale * z;
    }
    m
}
