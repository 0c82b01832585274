use advflow::flow::{interpolate, SamplerConfig};
use advflow::net::{grad_check, Activation, ArchSpec, VelocityModel};
use advflow::rl::{
    advantageflow_loss, advantageflow_terms, compute_advantages, ema_update, train_advantageflow, GammaSchedule,
    ModelTriple, PromptSet, TrainConfig,
};
use advflow::rng::{normal_vec, tag, SeedStream};
use proptest::prelude::*;

fn model(seed: u64) -> VelocityModel {
    let arch = ArchSpec::new(2, 1, vec![8, 8], Activation::Tanh);
    VelocityModel::xavier(arch, &mut SeedStream::new(seed).stream(tag::INIT, 0))
}

fn nudged(m: &VelocityModel, scale: f64, seed: u64) -> VelocityModel {
    let mut out = m.clone();
    let z = normal_vec(&mut SeedStream::new(seed).stream(tag::ORACLE, 99), out.param_count());
    for (p, z) in out.params_mut().iter_mut().zip(z) {
        *p += scale * z;
    }
    out
}

/// Eq. (5) written out directly, without clipping.
fn raw_advantages(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n: usize = rows.iter().map(Vec::len).sum();
    let devs: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|x| x - m).collect()
        })
        .collect();
    let z = (devs.iter().flatten().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    (devs, z)
}

fn schedules() -> [GammaSchedule; 4] {
    [
        GammaSchedule::Constant { value: 1.1 },
        GammaSchedule::AdaptiveOneMinusA,
        GammaSchedule::Nft { beta: 1.0 },
        GammaSchedule::Nft { beta: 0.3 },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn advantages_match_the_standardize_and_clip_rule(
        rows in (1usize..6, 1usize..6).prop_flat_map(|(l, k)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, k), l))
    ) {
        let got = compute_advantages(&rows).unwrap();
        let (devs, z) = raw_advantages(&rows);
        for (drow, grow) in devs.iter().zip(&got) {
            prop_assert!(drow.iter().sum::<f64>().abs() <= 1e-12 * (1.0 + drow.iter().map(|d| d.abs()).sum::<f64>()));
            for (d, a) in drow.iter().zip(grow) {
                prop_assert!((-1.0..=1.0).contains(a));
                let expected = if z < 1e-8 { 0.0 } else { (d / z).clamp(-1.0, 1.0) };
                prop_assert!((a - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn loss_is_a_quadratic_in_the_prediction_with_the_reported_coefficient(
        seed in 0u64..10_000, a in -1.0f64..=1.0, which in 0usize..4, lambda in 0.0f64..0.1
    ) {
        let sched = schedules()[which];
        let mut rng = SeedStream::new(seed).stream(tag::ORACLE, 0);
        let (f, x0, f_old, f_ref, d) =
            (normal_vec(&mut rng, 2), normal_vec(&mut rng, 2), normal_vec(&mut rng, 2), normal_vec(&mut rng, 2), normal_vec(&mut rng, 2));
        let (w, g) = (sched.advantage_weight(a), sched.gamma(a));
        let at = |h: f64| {
            let p: Vec<f64> = f.iter().zip(&d).map(|(f, d)| f + h * d).collect();
            advantageflow_terms(&p, &x0, &f_old, &f_ref, w, g, lambda).0
        };
        let h = 0.5;
        let (l0, l1, l2) = (at(0.0), at(h), at(2.0 * h));
        let second = l2.total - 2.0 * l1.total + l0.total;
        let dd: f64 = d.iter().map(|x| x * x).sum();
        let q = l0.quad_coeff;
        prop_assert!((second - 2.0 * q * h * h * dd).abs() <= 1e-9 * (1.0 + second.abs()));
        if q.abs() > 1e-9 {
            prop_assert_eq!(second > 0.0, q > 0.0);
        }
        prop_assert_eq!(l0.total, l0.advantage_term + l0.rollout_term + l0.reference_term);
    }

    #[test]
    fn ema_contracts_toward_learned(seed in 0u64..1000, rho in 0.0f64..=1.0) {
        let learned = model(seed);
        let old = nudged(&learned, 0.5, seed);
        let mut new = old.clone();
        ema_update(&mut new, &learned, rho).unwrap();
        let dist = |a: &VelocityModel, b: &VelocityModel| {
            a.params().iter().zip(b.params()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let before = dist(&old, &learned);
        prop_assert!((dist(&new, &learned) - rho * before).abs() <= 1e-12 * (1.0 + before));
    }
}

#[test]
fn convex_schedules_keep_quad_coeff_positive() {
    for sched in [
        GammaSchedule::Constant { value: 1.1 },
        GammaSchedule::AdaptiveOneMinusA,
        GammaSchedule::Nft { beta: 1.0 },
    ] {
        assert!(sched.strictly_convex(0.001));
        for i in 0..=200 {
            let a = -1.0 + i as f64 / 100.0;
            assert!(
                sched.advantage_weight(a) + sched.gamma(a) + 0.001 > 0.0,
                "{sched:?} at {a}"
            );
        }
    }
    assert!(!GammaSchedule::Constant { value: 0.9 }.strictly_convex(0.001));
}

#[test]
fn advantageflow_gradient_matches_finite_differences_for_each_schedule() {
    for seed in 0..5 {
        let base = model(seed);
        let triple = ModelTriple {
            rollout: nudged(&base, 0.1, seed + 100),
            reference: nudged(&base, 0.2, seed + 200),
            learned: base,
        };
        let mut rng = SeedStream::new(seed).stream(tag::ORACLE, 1);
        let s = interpolate(
            &normal_vec(&mut rng, 2),
            &normal_vec(&mut rng, 2),
            0.2 + 0.15 * seed as f64,
        )
        .unwrap();
        let c = normal_vec(&mut rng, 1);
        for sched in schedules() {
            let a = -0.7 + 0.3 * seed as f64;
            let r = grad_check(
                &triple.learned,
                |m| {
                    let t = ModelTriple {
                        learned: m.clone(),
                        ..triple.clone()
                    };
                    let (terms, g) = advantageflow_loss(
                        &t,
                        sched.advantage_weight(a),
                        &s.x0,
                        &s.xt,
                        s.t,
                        &c,
                        sched.gamma(a),
                        0.001,
                    )
                    .unwrap();
                    (terms.total, g)
                },
                1e-5,
            );
            assert!(r.pass, "{sched:?}: {r:?}");
        }
    }
}

#[test]
fn no_gradient_flows_into_rollout_or_reference() {
    let m = model(3);
    let s = interpolate(&[0.5, -1.0], &[0.2, 0.3], 0.6).unwrap();
    let c = [0.1];
    let (dr, dq) = (nudged(&m, 0.3, 1), nudged(&m, 0.3, 2));
    let shift = |p: &VelocityModel, d: &VelocityModel| {
        let mut out = p.clone();
        for ((o, a), b) in out.params_mut().iter_mut().zip(d.params()).zip(m.params()) {
            *o += a - b;
        }
        out
    };
    let anchored = ModelTriple {
        learned: m.clone(),
        rollout: dr.clone(),
        reference: dq.clone(),
    };
    let (_, g) = advantageflow_loss(&anchored, 0.4, &s.x0, &s.xt, s.t, &c, 1.1, 0.5).unwrap();
    // If the anchors moved together with the learned network the derivative
    // would pick up their terms; the returned gradient must not.
    let r = grad_check(
        &m,
        |p| {
            let t = ModelTriple {
                learned: p.clone(),
                rollout: shift(p, &dr),
                reference: shift(p, &dq),
            };
            let (terms, _) = advantageflow_loss(&t, 0.4, &s.x0, &s.xt, s.t, &c, 1.1, 0.5).unwrap();
            (terms.total, g.clone())
        },
        1e-5,
    );
    assert!(!r.pass, "returned gradient equals the co-moving total derivative");
    let tied = ModelTriple::from_reference(m.clone());
    // Perturbing the rollout network changes the loss but the gradient still
    // matches the learned-only derivative at the new anchor.
    let moved = ModelTriple {
        rollout: nudged(&m, 0.3, 1),
        ..tied.clone()
    };
    let (l0, _) = advantageflow_loss(&tied, 0.4, &s.x0, &s.xt, s.t, &c, 1.1, 0.001).unwrap();
    let (l1, _) = advantageflow_loss(&moved, 0.4, &s.x0, &s.xt, s.t, &c, 1.1, 0.001).unwrap();
    assert_ne!(l0.total, l1.total);
    let r = grad_check(
        &m,
        |p| {
            let t = ModelTriple {
                learned: p.clone(),
                ..moved.clone()
            };
            let (terms, g) = advantageflow_loss(&t, 0.4, &s.x0, &s.xt, s.t, &c, 1.1, 0.001).unwrap();
            (terms.total, g)
        },
        1e-5,
    );
    assert!(r.pass, "{r:?}");
}

#[test]
fn identical_networks_and_zero_advantage_give_zero_loss_and_gradient() {
    let tied = ModelTriple::from_reference(model(5));
    let s = interpolate(&[0.5, -1.0], &[0.2, 0.3], 0.6).unwrap();
    let (terms, g) = advantageflow_loss(&tied, 0.0, &s.x0, &s.xt, s.t, &[0.2], 1.1, 0.001).unwrap();
    assert_eq!(terms.total, 0.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        prompts_per_batch: 4,
        samples_per_prompt: 4,
        iterations: 20,
        eval_samples: 64,
        eval_every: 5,
        sampler: SamplerConfig::ode(5),
        eval_sampler: SamplerConfig::ode(5),
        wall_clock: false,
        ..TrainConfig::default()
    }
}

#[test]
fn single_sample_groups_leave_the_model_untouched() {
    let reference = model(6);
    let mut triple = ModelTriple::from_reference(reference.clone());
    let cfg = TrainConfig {
        samples_per_prompt: 1,
        ..tiny_cfg()
    };
    let prompts = PromptSet::new(vec![vec![0.0], vec![1.0]]).unwrap();
    let out = train_advantageflow(
        &mut triple,
        &|x: &[f64], _: &[f64]| x[0],
        &prompts,
        &cfg,
        SeedStream::new(1),
        |_| {},
    )
    .unwrap();
    assert!(out.metrics.iter().all(|m| m.adv_term == 0.0 && m.grad_norm == 0.0));
    assert_eq!(triple.learned, reference);
    assert_eq!(out.final_eval(), Some(out.initial_eval));
}

#[test]
fn frozen_rollout_with_heavy_regularization_stays_near_init() {
    let drift = |gamma: f64| {
        let reference = model(7);
        let mut triple = ModelTriple::from_reference(reference.clone());
        let cfg = TrainConfig {
            rho: 1.0,
            lambda: 0.0,
            gamma: GammaSchedule::Constant { value: gamma },
            optimizer: advflow::net::OptimizerKind::adam(1e-2),
            ..tiny_cfg()
        };
        let prompts = PromptSet::new(vec![vec![0.0]]).unwrap();
        train_advantageflow(
            &mut triple,
            &|x: &[f64], _: &[f64]| x[0],
            &prompts,
            &cfg,
            SeedStream::new(2),
            |_| {},
        )
        .unwrap();
        assert_eq!(triple.rollout, reference);
        let probes = (0..64).map(|i| normal_vec(&mut SeedStream::new(3).stream(tag::EVAL, i), 2));
        probes
            .map(|x| {
                let (a, b) = (
                    triple.learned.forward(&x, 0.5, &[0.0]).unwrap(),
                    reference.forward(&x, 0.5, &[0.0]).unwrap(),
                );
                a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / 64.0
    };
    let (loose, tight) = (drift(1.1), drift(50.0));
    assert!(tight < 0.2 * loose, "gamma=50 drift {tight} vs gamma=1.1 drift {loose}");
}
