use rand::seq::index;
use serde::Serialize;

use super::{GradVector, VelocityModel};
use crate::rng::{tag, SeedStream};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Central finite-difference check of an analytic gradient.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub tolerance: f64,
    pub step: f64,
    /// Coordinates to probe; all of them when the model is smaller.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            step: 1e-3,
            coords: 256,
            seed: 0x5eed,
        }
    }
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    /// `loss` maps a model to its scalar loss and analytic gradient.
    pub fn run<F>(&self, model: &VelocityModel, loss: F) -> GradCheckReport
    where
        F: Fn(&VelocityModel) -> (f64, GradVector),
    {
        let n = model.param_count();
        let (_, analytic) = loss(model);
        let picks: Vec<usize> = if n <= self.coords.max(200) {
            (0..n).collect()
        } else {
            let mut rng = SeedStream::new(self.seed).stream(tag::GRAD_CHECK, n as u64);
            let mut v = index::sample(&mut rng, n, self.coords.max(200)).into_vec();
            v.sort_unstable();
            v
        };

        // Coordinates far below the gradient's scale are compared against a
        // floor; their finite differences are pure rounding.
        let floor = analytic.0.iter().fold(0.0f64, |m, g| m.max(g.abs())) * 1e-7;
        let mut probe = model.clone();
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            coords_checked: picks.len(),
            tolerance: self.tolerance,
            pass: true,
        };
        for &i in &picks {
            let orig = probe.params[i];
            let mut at = |k: f64| {
                probe.params[i] = orig + k * self.step;
                loss(&probe).0
            };
            // Fourth-order stencil: truncation error ~h^4, so a step large
            // enough to keep rounding small is still accurate.
            let numeric = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * self.step);
            probe.params[i] = orig;
            let abs = (numeric - analytic[i]).abs();
            let rel = if abs.is_nan() {
                f64::INFINITY
            } else {
                abs / numeric.abs().max(analytic[i].abs()).max(floor).max(1e-12)
            };
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = i;
            }
        }
        report.pass = report.max_rel_err <= self.tolerance;
        report
    }
}

/// [`GradCheck`] with the default step and coordinate budget.
pub fn grad_check<F>(model: &VelocityModel, loss: F, tolerance: f64) -> GradCheckReport
where
    F: Fn(&VelocityModel) -> (f64, GradVector),
{
    GradCheck::with_tolerance(tolerance).run(model, loss)
}
