//! Exact and Monte-Carlo oracles for the distribution-level identities
//! behind advantage-weighted fitting.
//!
//! On a finite support every expectation is a finite sum, so the tilt
//! normalization, the reward-gain identity and the Fisher-Rao direction can
//! be checked to rounding error. The variance-reduction statement is
//! statistical and is checked on a Gaussian prior, where the posterior mean
//! of `x0` given `x_t` is linear in `x_t` and known in closed form.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::flow::{clean_from_velocity, interpolate, sample_time, sq_dist};
use crate::net::VelocityModel;
use crate::rng::{normal_vec, tag, Rng, SeedStream};

/// Tolerance on `sum p = 1`.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Explicit distribution over a finite set of points, with a reward per
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDist {
    support: Vec<Vec<f64>>,
    probs: Vec<f64>,
    rewards: Vec<f64>,
}

impl FiniteDist {
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("distribution has an empty support".into()));
        }
        check_dim("support", probs.len(), support.len())?;
        check_dim("rewards", probs.len(), rewards.len())?;
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Input(format!(
                "probability at support point {i} is negative or non-finite"
            )));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::Input(format!("non-finite reward at support point {i}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            support,
            probs,
            rewards,
        })
    }

    /// Scalar support points `0, 1, ..., n-1`.
    pub fn on_indices(probs: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        let support = (0..probs.len()).map(|i| vec![i as f64]).collect();
        Self::new(support, probs, rewards)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.probs.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    pub fn mean_reward(&self) -> f64 {
        self.expect(&self.rewards)
    }

    pub fn reward_variance(&self) -> f64 {
        let m = self.mean_reward();
        self.probs
            .iter()
            .zip(&self.rewards)
            .map(|(p, r)| p * (r - m) * (r - m))
            .sum()
    }

    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// `A(x) = r(x) - E_p[r]`.
pub fn centered_advantage(dist: &FiniteDist) -> Vec<f64> {
    let m = dist.mean_reward();
    dist.rewards.iter().map(|r| r - m).collect()
}

/// Largest `eta` keeping `1 + eta A >= 0`; infinite when no advantage is
/// negative.
pub fn max_admissible_eta(dist: &FiniteDist) -> f64 {
    let min_a = centered_advantage(dist).into_iter().fold(f64::INFINITY, f64::min);
    if min_a < 0.0 {
        1.0 / min_a.abs()
    } else {
        f64::INFINITY
    }
}

/// Linear tilt `q = (1 + eta A) p`. No renormalization is applied; the
/// output sums to one because `A` is centered.
pub fn tilt(dist: &FiniteDist, eta: f64) -> Result<FiniteDist> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Input(format!("tilt step {eta} must be finite and nonnegative")));
    }
    let adv = centered_advantage(dist);
    let max_eta = max_admissible_eta(dist);
    if eta > max_eta {
        let (index, &advantage) = adv
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty support");
        return Err(Error::InvalidTilt {
            index,
            eta,
            advantage,
            max_eta,
        });
    }
    let probs = dist
        .probs
        .iter()
        .zip(&adv)
        .map(|(p, a)| {
            let w = 1.0 + eta * a;
            // At eta == max_eta the weight of the worst point is zero up to rounding.
            let w = if w < 0.0 && w > -4.0 * f64::EPSILON { 0.0 } else { w };
            w * p
        })
        .collect();
    Ok(FiniteDist {
        support: dist.support.clone(),
        probs,
        rewards: dist.rewards.clone(),
    })
}

/// `E_q[r] - E_p[r]` for the tilt of size `eta`.
pub fn reward_gain(dist: &FiniteDist, eta: f64) -> Result<f64> {
    let q = tilt(dist, eta)?;
    // Centered rewards: sum(q - p) = 0, and the offset would only add cancellation.
    Ok(q.probs
        .iter()
        .zip(&dist.probs)
        .zip(centered_advantage(dist))
        .map(|((q, p), a)| (q - p) * a)
        .sum())
}

/// Natural-gradient direction of `p -> E_p[r]` under the Fisher-Rao metric.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherRaoDirection {
    /// Tangent function `u*(x) = r(x) - E_p[r]`.
    pub u_star: Vec<f64>,
    /// `delta p = u* p`.
    pub delta_p: Vec<f64>,
}

impl FisherRaoDirection {
    /// `p + eta delta p`.
    pub fn step(&self, dist: &FiniteDist, eta: f64) -> Vec<f64> {
        dist.probs.iter().zip(&self.delta_p).map(|(p, d)| p + eta * d).collect()
    }

    /// `|<u*, u>_p - E_p[r u]|` for a zero-mean tangent function `u`.
    pub fn condition_residual(&self, dist: &FiniteDist, u: &[f64]) -> Result<f64> {
        check_dim("tangent function", dist.len(), u.len())?;
        let mean_u = dist.expect(u);
        let scale = dist.probs.iter().zip(u).map(|(p, v)| p * v.abs()).sum::<f64>().max(1.0);
        if mean_u.abs() > 1e-12 * scale {
            return Err(Error::Input(format!("tangent function has mean {mean_u}, not 0")));
        }
        let lhs: f64 = dist
            .probs
            .iter()
            .zip(&self.u_star)
            .zip(u)
            .map(|((p, a), b)| p * a * b)
            .sum();
        let rhs: f64 = dist
            .probs
            .iter()
            .zip(&dist.rewards)
            .zip(u)
            .map(|((p, r), b)| p * r * b)
            .sum();
        Ok((lhs - rhs).abs())
    }
}

pub fn fisher_rao_direction(dist: &FiniteDist) -> Result<FisherRaoDirection> {
    if let Some(i) = dist.probs.iter().position(|&p| p <= 0.0) {
        return Err(Error::Input(format!(
            "support point {i} has zero probability; tangent vectors u p need p > 0"
        )));
    }
    let u_star = centered_advantage(dist);
    let delta_p = u_star.iter().zip(&dist.probs).map(|(a, p)| a * p).collect();
    Ok(FisherRaoDirection { u_star, delta_p })
}

/// Zero-mean version of `u` under `dist`.
pub fn center_under(dist: &FiniteDist, u: &[f64]) -> Vec<f64> {
    let m = dist.expect(u);
    u.iter().map(|v| v - m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossDecomposition {
    /// Mean of `||x0 - f||^2`.
    pub reward_independent: f64,
    /// Mean of `A ||x0 - f||^2`.
    pub reward_dependent: f64,
    /// `reward_independent + eta reward_dependent`.
    pub recombined: f64,
    /// Mean of `(1 + eta A) ||x0 - f||^2`, the tilted-target loss after the
    /// change of measure.
    pub direct: f64,
}

/// Monte-Carlo estimate of the tilted-target prediction loss and its two
/// parts, all from the same draws of `(x0, eps, t)`.
pub fn decompose_loss(
    model: &VelocityModel,
    dist: &FiniteDist,
    cond: &[f64],
    eta: f64,
    n_samples: usize,
    t_min: f64,
    seeds: SeedStream,
) -> Result<LossDecomposition> {
    if n_samples == 0 {
        return Err(Error::Input("decomposition needs at least one sample".into()));
    }
    let dim = model.arch().data_dim;
    for x in dist.support() {
        check_dim("support point", dim, x.len())?;
    }
    let adv = centered_advantage(dist);
    let draws: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = seeds.stream(tag::ORACLE, j as u64);
            let i = dist.sample_index(&mut rng);
            let t = sample_time(&mut rng, t_min);
            let eps = normal_vec(&mut rng, dim);
            let s = interpolate(&dist.support[i], &eps, t)?;
            let v = model.forward(&s.xt, t, cond)?;
            Ok((adv[i], sq_dist(&s.x0, &clean_from_velocity(&s.xt, t, &v))))
        })
        .collect::<Result<_>>()?;
    let n = n_samples as f64;
    let independent = draws.iter().map(|(_, l)| l).sum::<f64>() / n;
    let dependent = draws.iter().map(|(a, l)| a * l).sum::<f64>() / n;
    let direct = draws.iter().map(|(a, l)| (1.0 + eta * a) * l).sum::<f64>() / n;
    Ok(LossDecomposition {
        reward_independent: independent,
        reward_dependent: dependent,
        recombined: independent + eta * dependent,
        direct,
    })
}

/// Gaussian prior on `x0` with Gaussian forward noise at a fixed time, for
/// which `E[x0 | x_t]` is linear in `x_t`.
#[derive(Debug, Clone)]
pub struct GaussianToy {
    pub prior_mean: Vec<f64>,
    /// Row-major `d x d` prior covariance.
    pub prior_cov: Vec<f64>,
    /// Standard deviation of `eps`.
    pub noise_std: f64,
    pub t: f64,
    prior_sqrt: DMatrix<f64>,
    gain: DMatrix<f64>,
}

impl GaussianToy {
    pub fn new(prior_mean: Vec<f64>, prior_cov: Vec<f64>, noise_std: f64, t: f64) -> Result<Self> {
        let d = prior_mean.len();
        if d == 0 {
            return Err(Error::Input("toy needs at least one dimension".into()));
        }
        check_dim("prior covariance entries", d * d, prior_cov.len())?;
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::Input("noise_std must be positive".into()));
        }
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Input(format!("toy time {t} must lie in (0, 1]")));
        }
        let cov = DMatrix::from_row_slice(d, d, &prior_cov);
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Input("prior covariance is not symmetric".into()));
        }
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
            return Err(Error::Input("prior covariance is not positive semi-definite".into()));
        }
        let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let prior_sqrt = &eig.eigenvectors * sqrt_vals;

        // Cov(x_t) = (1-t)^2 S + t^2 s^2 I, Cov(x0, x_t) = (1-t) S.
        let xt_cov = &cov * (1.0 - t).powi(2) + DMatrix::identity(d, d) * (t * noise_std).powi(2);
        let xt_inv = xt_cov
            .cholesky()
            .ok_or_else(|| Error::Input("x_t covariance is not positive definite".into()))?
            .inverse();
        let gain = &cov * (1.0 - t) * xt_inv;
        Ok(Self {
            prior_mean,
            prior_cov,
            noise_std,
            t,
            prior_sqrt,
            gain,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    /// `E[x0 | x_t] = mu + G (x_t - (1 - t) mu)`.
    pub fn posterior_mean(&self, xt: &[f64]) -> Vec<f64> {
        let mu = DVector::from_column_slice(&self.prior_mean);
        let resid = DVector::from_column_slice(xt) - &mu * (1.0 - self.t);
        (mu + &self.gain * resid).iter().copied().collect()
    }

    pub fn sample_x0(&self, rng: &mut Rng) -> Vec<f64> {
        let z = DVector::from_vec(normal_vec(rng, self.dim()));
        let x = DVector::from_column_slice(&self.prior_mean) + &self.prior_sqrt * z;
        x.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RaoBlackwellReport {
    pub n_trials: usize,
    /// Mean over parameters of the per-coordinate variance of
    /// `grad ||x0 - f||^2`.
    pub var_sample: f64,
    /// Same for `grad ||f_old - f||^2` with `f_old` the posterior mean.
    pub var_rollout: f64,
    /// `var_sample * (1 + 3 / sqrt(n))`.
    pub var_bound: f64,
    /// Paired difference of the two gradients projected on a fixed random
    /// unit direction: mean and standard error.
    pub mean_diff: f64,
    pub mean_diff_se: f64,
    /// Largest per-coordinate gap between the two mean gradients (reported
    /// only).
    pub max_coord_mean_gap: f64,
    /// `E<x0 - f_old, f_old - f>` and its standard error.
    pub cross_term: f64,
    pub cross_term_se: f64,
    pub pass: bool,
}

/// Standard errors allowed for the cross term, which should vanish exactly
/// when `f_old` is the posterior mean.
pub const CROSS_TERM_SE: f64 = 4.0;

#[derive(Clone)]
struct Moments {
    sum_s: Vec<f64>,
    sq_s: Vec<f64>,
    sum_r: Vec<f64>,
    sq_r: Vec<f64>,
    diff: (f64, f64),
    cross: (f64, f64),
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            sum_s: vec![0.0; n],
            sq_s: vec![0.0; n],
            sum_r: vec![0.0; n],
            sq_r: vec![0.0; n],
            diff: (0.0, 0.0),
            cross: (0.0, 0.0),
        }
    }

    fn merge(&mut self, o: &Moments) {
        for i in 0..self.sum_s.len() {
            self.sum_s[i] += o.sum_s[i];
            self.sq_s[i] += o.sq_s[i];
            self.sum_r[i] += o.sum_r[i];
            self.sq_r[i] += o.sq_r[i];
        }
        self.diff.0 += o.diff.0;
        self.diff.1 += o.diff.1;
        self.cross.0 += o.cross.0;
        self.cross.1 += o.cross.1;
    }
}

fn mean_and_se(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

/// Compares single-sample gradients of the sample-anchored and
/// posterior-mean-anchored losses at the toy's fixed time.
pub fn rao_blackwell_check(
    toy: &GaussianToy,
    model: &VelocityModel,
    cond: &[f64],
    n_trials: usize,
    seeds: SeedStream,
) -> Result<RaoBlackwellReport> {
    if n_trials < 2 {
        return Err(Error::Input("need at least two trials".into()));
    }
    check_dim("toy dimension", model.arch().data_dim, toy.dim())?;
    let n_params = model.param_count();
    let t = toy.t;
    let direction = {
        let w = normal_vec(&mut seeds.stream(tag::ORACLE, u64::MAX), n_params);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };

    const CHUNK: usize = 256;
    let partials: Vec<Result<Moments>> = (0..n_trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut m = Moments::new(n_params);
            let mut g_s = vec![0.0; n_params];
            let mut g_r = vec![0.0; n_params];
            for j in chunk * CHUNK..((chunk + 1) * CHUNK).min(n_trials) {
                let mut rng = seeds.stream(tag::ORACLE, j as u64);
                let x0 = toy.sample_x0(&mut rng);
                let eps: Vec<f64> = normal_vec(&mut rng, toy.dim())
                    .into_iter()
                    .map(|z| toy.noise_std * z)
                    .collect();
                let s = interpolate(&x0, &eps, t)?;
                let trace = model.trace(&s.xt, t, cond)?;
                let f = clean_from_velocity(&s.xt, t, trace.output());
                let f_old = toy.posterior_mean(&s.xt);

                g_s.iter_mut().for_each(|g| *g = 0.0);
                g_r.iter_mut().for_each(|g| *g = 0.0);
                // d/dv ||a - f||^2 = 2 t (a - f)
                let up_s: Vec<f64> = x0.iter().zip(&f).map(|(a, f)| 2.0 * t * (a - f)).collect();
                let up_r: Vec<f64> = f_old.iter().zip(&f).map(|(a, f)| 2.0 * t * (a - f)).collect();
                trace.accumulate(model, &up_s, &mut g_s)?;
                trace.accumulate(model, &up_r, &mut g_r)?;

                let mut proj = 0.0;
                for i in 0..n_params {
                    m.sum_s[i] += g_s[i];
                    m.sq_s[i] += g_s[i] * g_s[i];
                    m.sum_r[i] += g_r[i];
                    m.sq_r[i] += g_r[i] * g_r[i];
                    proj += (g_s[i] - g_r[i]) * direction[i];
                }
                m.diff.0 += proj;
                m.diff.1 += proj * proj;
                let cross: f64 = (0..x0.len()).map(|i| (x0[i] - f_old[i]) * (f_old[i] - f[i])).sum();
                m.cross.0 += cross;
                m.cross.1 += cross * cross;
            }
            Ok(m)
        })
        .collect();
    let mut total = Moments::new(n_params);
    for p in partials {
        total.merge(&p?);
    }

    let n = n_trials as f64;
    let var = |sum: &[f64], sq: &[f64]| {
        sum.iter()
            .zip(sq)
            .map(|(s, q)| ((q - s * s / n) / (n - 1.0)).max(0.0))
            .sum::<f64>()
            / n_params as f64
    };
    let var_sample = var(&total.sum_s, &total.sq_s);
    let var_rollout = var(&total.sum_r, &total.sq_r);
    let var_bound = var_sample * (1.0 + 3.0 / n.sqrt());
    let (mean_diff, mean_diff_se) = mean_and_se(total.diff.0, total.diff.1, n);
    let (cross_term, cross_term_se) = mean_and_se(total.cross.0, total.cross.1, n);
    let max_coord_mean_gap = total
        .sum_s
        .iter()
        .zip(&total.sum_r)
        .map(|(a, b)| ((a - b) / n).abs())
        .fold(0.0, f64::max);

    let within = |m: f64, se: f64, k: f64| m.abs() <= k * se || m == 0.0;
    let pass = var_rollout <= var_bound
        && within(mean_diff, mean_diff_se, 3.0)
        && within(cross_term, cross_term_se, CROSS_TERM_SE);
    Ok(RaoBlackwellReport {
        n_trials,
        var_sample,
        var_rollout,
        var_bound,
        mean_diff,
        mean_diff_se,
        max_coord_mean_gap,
        cross_term,
        cross_term_se,
        pass,
    })
}
