use advflow::flow::{
    flow_matching_loss, gaussian_logpdf, interpolate, prediction_loss, sample_ode, sample_sde, SamplerConfig,
};
use advflow::harness::{pretrain_model, DataSpec, PretrainConfig, RewardSpec, Task, TaskSpec};
use advflow::net::{grad_check, Activation, ArchSpec, OptimizerKind, VelocityModel};
use advflow::rng::{normal_vec, tag, SeedStream};
use proptest::prelude::*;
use rand::Rng as _;

fn model(data_dim: usize, cond_dim: usize, seed: u64) -> VelocityModel {
    let arch = ArchSpec::new(data_dim, cond_dim, vec![10, 10], Activation::Tanh);
    VelocityModel::xavier(arch, &mut SeedStream::new(seed).stream(tag::INIT, 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // Below t ~ 1e-3 the rounding of x_t, about eps*|x0|, is no longer small
    // next to the residual t*|v - target| and the identity only holds to eps/t.
    #[test]
    fn prediction_loss_is_t_squared_flow_matching_loss(seed in 0u64..10_000, t in 0.001f64..=1.0) {
        let m = model(2, 1, seed % 7);
        let mut rng = SeedStream::new(seed).stream(tag::ORACLE, 0);
        let (x0, eps, c) = (normal_vec(&mut rng, 2), normal_vec(&mut rng, 2), normal_vec(&mut rng, 1));
        let (fm, gfm) = flow_matching_loss(&m, &x0, &eps, t, &c).unwrap();
        let (pl, gpl) = prediction_loss(&m, &x0, &eps, t, &c).unwrap();
        prop_assert!((pl - t * t * fm).abs() <= 1e-12 * (t * t * fm).abs().max(1e-300));
        let mut scaled = gfm.clone();
        scaled.scale(t * t);
        prop_assert!(gpl.max_abs_diff(&scaled) <= 1e-12 * (1.0 + gpl.norm()));
    }

    #[test]
    fn interpolant_is_the_convex_combination(a in -5.0f64..5.0, b in -5.0f64..5.0, t in 0.0f64..=1.0) {
        let s = interpolate(&[a], &[b], t).unwrap();
        prop_assert_eq!(s.xt[0], (1.0 - t) * a + t * b);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..5 {
        let m = model(2, 1, seed);
        let mut rng = SeedStream::new(seed).stream(tag::ORACLE, 1);
        let (x0, eps, c) = (
            normal_vec(&mut rng, 2),
            normal_vec(&mut rng, 2),
            normal_vec(&mut rng, 1),
        );
        let t = rng.random_range(0.05..1.0);
        let r = grad_check(&m, |m| flow_matching_loss(m, &x0, &eps, t, &c).unwrap(), 1e-5);
        assert!(r.pass, "flow matching: {r:?}");
        let r = grad_check(&m, |m| prediction_loss(m, &x0, &eps, t, &c).unwrap(), 1e-5);
        assert!(r.pass, "prediction: {r:?}");
    }
}

#[test]
fn sde_transition_density_integrates_to_one() {
    let m = model(1, 0, 3);
    let cfg = SamplerConfig::sde(8, 0.5);
    let traj = sample_sde(&m, &[0.4], &[], &cfg, &mut SeedStream::new(1).stream(tag::ROLLOUT, 0)).unwrap();
    let mut rng = SeedStream::new(2).stream(tag::ORACLE, 0);
    for r in &traj.records {
        let recomputed = gaussian_logpdf(&r.x_next, &r.mean, r.std);
        assert_eq!(r.logprob, Some(recomputed));
        assert!(recomputed.is_finite());
        // Uniform importance sampling over mean +- 6 std.
        let (lo, width) = (r.mean[0] - 6.0 * r.std, 12.0 * r.std);
        let n = 20_000;
        let mass: f64 = (0..n)
            .map(|_| gaussian_logpdf(&[lo + width * rng.random_range(0.0..1.0)], &r.mean, r.std).exp())
            .sum::<f64>()
            * width
            / n as f64;
        assert!((mass - 1.0).abs() < 0.05, "t = {}: mass {mass}", r.t);
    }
}

fn two_gauss() -> Task {
    Task::new(TaskSpec {
        data: DataSpec::TwoGauss {
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            weights: vec![0.5, 0.5],
            std: 0.5,
        },
        reward: RewardSpec::ModeIndicator { target: 1 },
    })
    .unwrap()
}

#[test]
fn ode_samples_converge_as_steps_double() {
    let task = two_gauss();
    let cfg = PretrainConfig {
        steps: 400,
        batch_size: 128,
        optimizer: OptimizerKind::adam(3e-3),
        ..PretrainConfig::default()
    };
    let arch = ArchSpec::new(2, 0, vec![32, 32], Activation::Tanh);
    let m = pretrain_model(&task, &arch, &cfg, SeedStream::new(9), |_| Ok(())).unwrap();
    let starts: Vec<Vec<f64>> = (0..200)
        .map(|i| normal_vec(&mut SeedStream::new(10).stream(tag::EVAL, i), 2))
        .collect();
    let endpoints = |steps: usize| -> Vec<Vec<f64>> {
        starts
            .iter()
            .map(|x| {
                sample_ode(&m, x, &[], &SamplerConfig::ode(steps))
                    .unwrap()
                    .final_state()
                    .to_vec()
            })
            .collect()
    };
    let fine = endpoints(640);
    let errs: Vec<f64> = [5, 10, 20, 40, 80]
        .into_iter()
        .map(|steps| {
            let e = endpoints(steps);
            e.iter()
                .zip(&fine)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .sum::<f64>()
                / starts.len() as f64
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "{errs:?}");
    }
    // First order: halving dt roughly halves the error once in the asymptotic regime.
    let ratio = errs[3] / errs[4];
    assert!((1.4..3.0).contains(&ratio), "{errs:?}");
}

#[test]
fn pretrained_mixture_has_balanced_mode_masses() {
    let task = two_gauss();
    let cfg = PretrainConfig::default();
    let arch = ArchSpec::new(2, 0, vec![64, 64], Activation::Silu);
    let m = pretrain_model(&task, &arch, &cfg, SeedStream::new(17), |_| Ok(())).unwrap();
    let report = advflow::harness::eval_report(&m, &task, 2000, &SamplerConfig::ode(40), SeedStream::new(1)).unwrap();
    for (mass, w) in report.mode_masses.iter().zip([0.5, 0.5]) {
        assert!((mass - w).abs() <= 0.1, "{:?}", report.mode_masses);
    }
}
