//! Self-check suite behind `advflow verify`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{flow_matching_loss, prediction_loss};
use crate::net::{grad_check, Activation, ArchSpec, GradVector, VelocityModel};
use crate::nft::{draw_equiv_samples, equivalence_check, nft_branch_loss, offset_rollout, GAP_TOL, GRAD_TOL};
use crate::rl::{advantageflow_loss_at, compute_advantages, ema_update, GammaSchedule, ModelTriple};
use crate::rng::{normal_vec, tag, Rng, SeedStream};
use crate::theory::{
    center_under, decompose_loss, fisher_rao_direction, max_admissible_eta, rao_blackwell_check, reward_gain, tilt,
    FiniteDist, GaussianToy, CROSS_TERM_SE,
};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            check_name: name.into(),
            value,
            bound,
            pass: value <= bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub rao_blackwell_trials: usize,
    pub rao_blackwell_seeds: usize,
    /// Test-only fault injection: negate every analytic gradient handed to
    /// the gradient checks.
    pub flip_gradient_sign: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            rao_blackwell_trials: 10_000,
            rao_blackwell_seeds: 3,
            flip_gradient_sign: false,
        }
    }
}

const GRAD_MODELS: usize = 5;
const GRAD_TOL_REL: f64 = 1e-5;
const EXACT_TOL: f64 = 1e-12;

/// Runs every check; failures are reported in the results, not as errors.
pub fn run_verify(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let seeds = SeedStream::new(opts.seed);
    let mut out = grad_checks(opts, seeds.child(tag::GRAD_CHECK, 0))?;
    out.push(t_squared_identity(seeds.child(tag::ORACLE, 1))?);
    out.extend(tilt_checks(seeds.child(tag::ORACLE, 2))?);
    out.extend(fisher_rao_checks(seeds.child(tag::ORACLE, 3))?);
    out.push(decomposition_check(seeds.child(tag::ORACLE, 4))?);
    out.extend(rao_blackwell_checks(opts, seeds.child(tag::ORACLE, 5))?);
    out.extend(nft_checks(seeds.child(tag::ORACLE, 6))?);
    out.extend(degenerate_checks(seeds.child(tag::ORACLE, 7))?);
    Ok(out)
}

fn random_triple(i: usize, seeds: SeedStream) -> ModelTriple {
    let activation = if i % 2 == 0 { Activation::Tanh } else { Activation::Silu };
    let arch = ArchSpec::new(2, 2, vec![8, 8], activation);
    let mut rng = seeds.stream(tag::INIT, i as u64);
    let mut learned = VelocityModel::xavier(arch, &mut rng);
    // Nonzero biases so no coordinate's gradient is identically tiny.
    for p in learned.params_mut() {
        *p += 0.05 * normal_vec(&mut rng, 1)[0];
    }
    ModelTriple {
        rollout: offset_rollout(&learned, 0.1, seeds.child(tag::INIT, i as u64)),
        reference: offset_rollout(&learned, 0.2, seeds.child(tag::INIT, 1000 + i as u64)),
        learned,
    }
}

fn grad_checks(opts: &VerifyOptions, seeds: SeedStream) -> Result<Vec<CheckResult>> {
    let sign = if opts.flip_gradient_sign { -1.0 } else { 1.0 };
    let flip = |(l, mut g): (f64, GradVector)| {
        g.scale(sign);
        (l, g)
    };
    let schedules = [
        ("constant", GammaSchedule::Constant { value: 1.1 }),
        ("adaptive", GammaSchedule::AdaptiveOneMinusA),
        ("nft", GammaSchedule::Nft { beta: 0.5 }),
    ];
    let mut worst = vec![0.0f64; 3 + schedules.len()];
    for i in 0..GRAD_MODELS {
        let triple = random_triple(i, seeds);
        let s = &draw_equiv_samples(2, 2, 1, 0.05, seeds.child(tag::ORACLE, i as u64))?[0];
        let (x, c) = (&s.interp, &s.cond);
        let a = 2.0 * s.r_norm - 1.0;
        let mut errs = vec![
            grad_check(
                &triple.learned,
                |m| flip(flow_matching_loss(m, &x.x0, &x.eps, x.t, c).unwrap()),
                GRAD_TOL_REL,
            ),
            grad_check(
                &triple.learned,
                |m| flip(prediction_loss(m, &x.x0, &x.eps, x.t, c).unwrap()),
                GRAD_TOL_REL,
            ),
            grad_check(
                &triple.learned,
                |m| {
                    let t = ModelTriple {
                        learned: m.clone(),
                        ..triple.clone()
                    };
                    let (l, _, g) = nft_branch_loss(&t, 0.5, s.r_norm, x, c).unwrap();
                    flip((l, g))
                },
                GRAD_TOL_REL,
            ),
        ];
        for (_, sched) in &schedules {
            errs.push(grad_check(
                &triple.learned,
                |m| {
                    let t = ModelTriple {
                        learned: m.clone(),
                        ..triple.clone()
                    };
                    let (terms, g) =
                        advantageflow_loss_at(&t, sched.advantage_weight(a), x, c, sched.gamma(a), 0.001).unwrap();
                    flip((terms.total, g))
                },
                GRAD_TOL_REL,
            ));
        }
        for (w, r) in worst.iter_mut().zip(&errs) {
            *w = w.max(r.max_rel_err);
        }
    }
    let mut names = vec![
        "grad_check.flow_matching".to_string(),
        "grad_check.prediction".to_string(),
        "grad_check.nft_branch".to_string(),
    ];
    names.extend(schedules.iter().map(|(n, _)| format!("grad_check.advantageflow.{n}")));
    Ok(names
        .into_iter()
        .zip(worst)
        .map(|(n, v)| CheckResult::at_most(n, v, GRAD_TOL_REL))
        .collect())
}

fn t_squared_identity(seeds: SeedStream) -> Result<CheckResult> {
    let model = random_triple(0, seeds).learned;
    let mut worst = 0.0f64;
    // Training range of t; see the flow tests for why not below.
    for s in draw_equiv_samples(2, 2, 1000, 0.001, seeds)? {
        let x = &s.interp;
        let (fm, _) = flow_matching_loss(&model, &x.x0, &x.eps, x.t, &s.cond)?;
        let (pred, _) = prediction_loss(&model, &x.x0, &x.eps, x.t, &s.cond)?;
        let target = x.t * x.t * fm;
        let err = (pred - target).abs() / target.abs().max(f64::MIN_POSITIVE);
        if target != 0.0 || pred != 0.0 {
            worst = worst.max(err);
        }
    }
    Ok(CheckResult::at_most("t_squared_identity", worst, EXACT_TOL))
}

/// Random distribution on `n` points with strictly positive mass.
pub(crate) fn random_dist(rng: &mut Rng, n: usize) -> Result<FiniteDist> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    let mut probs: Vec<f64> = w.iter().map(|x| x / total).collect();
    let head: f64 = probs[..n - 1].iter().sum();
    probs[n - 1] = 1.0 - head;
    let rewards = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    FiniteDist::on_indices(probs, rewards)
}

fn tilt_checks(seeds: SeedStream) -> Result<Vec<CheckResult>> {
    let (mut sum_err, mut gain_err, mut boundary_misses) = (0.0f64, 0.0f64, 0.0);
    for i in 0..100 {
        let mut rng = seeds.stream(tag::ORACLE, i);
        let n = rng.random_range(2..=10);
        let d = random_dist(&mut rng, n)?;
        let max_eta = max_admissible_eta(&d);
        let eta = rng.random_range(0.0..1.0) * max_eta;
        let q = tilt(&d, eta)?;
        sum_err = sum_err.max((q.probs().iter().sum::<f64>() - 1.0).abs());
        let var = d.reward_variance();
        let expected = eta * var;
        gain_err = gain_err.max((reward_gain(&d, eta)? - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
        let below_ok = tilt(&d, max_eta).is_ok();
        let above_err = matches!(tilt(&d, max_eta * (1.0 + 1e-12)), Err(Error::InvalidTilt { .. }));
        if !(below_ok && above_err) {
            boundary_misses += 1.0;
        }
    }
    Ok(vec![
        CheckResult::at_most("tilt.normalization", sum_err, EXACT_TOL),
        CheckResult::at_most("tilt.reward_gain", gain_err, EXACT_TOL),
        CheckResult::at_most("tilt.positivity_boundary", boundary_misses, 0.0),
    ])
}

fn fisher_rao_checks(seeds: SeedStream) -> Result<Vec<CheckResult>> {
    let (mut step_err, mut cond_err) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let mut rng = seeds.stream(tag::ORACLE, i);
        let d = random_dist(&mut rng, 8)?;
        let dir = fisher_rao_direction(&d)?;
        let eta = 0.9 * max_admissible_eta(&d);
        let q = tilt(&d, eta)?;
        for (a, b) in dir.step(&d, eta).iter().zip(q.probs()) {
            step_err = step_err.max((a - b).abs());
        }
        for _ in 0..50 {
            let u: Vec<f64> = normal_vec(&mut rng, d.len());
            cond_err = cond_err.max(dir.condition_residual(&d, &center_under(&d, &u))?);
        }
    }
    Ok(vec![
        CheckResult::at_most("fisher_rao.step_matches_tilt", step_err, 8.0 * f64::EPSILON),
        CheckResult::at_most("fisher_rao.defining_condition", cond_err, EXACT_TOL),
    ])
}

fn decomposition_check(seeds: SeedStream) -> Result<CheckResult> {
    let model = VelocityModel::xavier(
        ArchSpec::new(1, 0, vec![8], Activation::Tanh),
        &mut seeds.stream(tag::INIT, 0),
    );
    let mut rng = seeds.stream(tag::ORACLE, 0);
    let d = random_dist(&mut rng, 6)?;
    let eta = 0.5 * max_admissible_eta(&d);
    let r = decompose_loss(&model, &d, &[], eta, 2000, 0.001, seeds)?;
    let err = (r.recombined - r.direct).abs() / r.direct.abs().max(1.0);
    Ok(CheckResult::at_most("decomposition.recombination", err, EXACT_TOL))
}

fn rao_blackwell_checks(opts: &VerifyOptions, seeds: SeedStream) -> Result<Vec<CheckResult>> {
    let toy = GaussianToy::new(vec![0.0], vec![1.0], 1.0, 0.5)?;
    let model = VelocityModel::xavier(
        ArchSpec::new(1, 0, vec![8], Activation::Tanh),
        &mut seeds.stream(tag::INIT, 0),
    );
    let mut out = Vec::new();
    for k in 0..opts.rao_blackwell_seeds {
        let r = rao_blackwell_check(
            &toy,
            &model,
            &[],
            opts.rao_blackwell_trials,
            seeds.child(tag::ORACLE, k as u64),
        )?;
        out.push(CheckResult::at_most(
            format!("rao_blackwell.variance.seed{k}"),
            r.var_rollout,
            r.var_bound,
        ));
        out.push(CheckResult::at_most(
            format!("rao_blackwell.mean_agreement.seed{k}"),
            r.mean_diff.abs(),
            3.0 * r.mean_diff_se,
        ));
        out.push(CheckResult::at_most(
            format!("rao_blackwell.cross_term.seed{k}"),
            r.cross_term.abs(),
            CROSS_TERM_SE * r.cross_term_se,
        ));
    }
    Ok(out)
}

fn nft_checks(seeds: SeedStream) -> Result<Vec<CheckResult>> {
    let triple = random_triple(0, seeds);
    let samples = draw_equiv_samples(2, 2, 500, 0.0, seeds)?;
    let mut out = Vec::new();
    for beta in [0.1, 0.5, 1.0] {
        let r = equivalence_check(&triple, beta, &samples, seeds)?;
        out.push(CheckResult::at_most(
            format!("nft_equivalence.gradient.beta{beta}"),
            r.max_grad_abs_diff,
            GRAD_TOL,
        ));
        out.push(CheckResult::at_most(
            format!("nft_equivalence.gap_invariance.beta{beta}"),
            r.max_gap_drift,
            GAP_TOL,
        ));
    }
    Ok(out)
}

fn degenerate_checks(seeds: SeedStream) -> Result<Vec<CheckResult>> {
    let max_abs = |rows: Vec<Vec<f64>>| rows.into_iter().flatten().fold(0.0f64, |m, a| m.max(a.abs()));
    let mut rng = seeds.stream(tag::ORACLE, 0);
    let singles: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-5.0..5.0)]).collect();
    let flat = vec![vec![0.3; 4]; 8];

    let triple = random_triple(0, seeds);
    let mut frozen = triple.rollout.clone();
    ema_update(&mut frozen, &triple.learned, 1.0)?;
    let mut copied = triple.rollout.clone();
    ema_update(&mut copied, &triple.learned, 0.0)?;
    let diff = |a: &VelocityModel, b: &VelocityModel| {
        a.params()
            .iter()
            .zip(b.params())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };
    Ok(vec![
        CheckResult::at_most(
            "advantages.single_sample_groups",
            max_abs(compute_advantages(&singles)?),
            0.0,
        ),
        CheckResult::at_most("advantages.zero_variance", max_abs(compute_advantages(&flat)?), 0.0),
        CheckResult::at_most("ema.rho_one_freezes", diff(&frozen, &triple.rollout), 0.0),
        CheckResult::at_most("ema.rho_zero_copies", diff(&copied, &triple.learned), 0.0),
    ])
}
