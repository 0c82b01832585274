use std::fs;
use std::path::Path;

use advflow::flow::SamplerConfig;
use advflow::harness::{
    compare_runs, eval_report, load_run, pretrain_model, run_compare, run_eval, run_finetune, run_pretrain, Algo,
    Ratio, RunConfig, Task,
};
use advflow::net::{load_checkpoint, save_checkpoint, Activation, ArchSpec, VelocityModel};
use advflow::rng::{tag, SeedStream};
use advflow::Error;

fn config(dir: &Path, extra: &str) -> RunConfig {
    let text = format!(
        r#"
seed = 5
output_dir = "{}"

[task.data]
kind = "two_gauss"
means = [[-2.0, 0.0], [2.0, 0.0]]
weights = [0.5, 0.5]

[task.reward]
kind = "mode_indicator"
target = 1

[arch]
data_dim = 2
hidden_widths = [8, 8]
activation = "tanh"

[pretrain]
steps = 20
batch_size = 16
log_every = 5
eval_samples = 50
eval_steps = 5

[train]
prompts_per_batch = 4
samples_per_prompt = 4
iterations = 6
eval_samples = 50
eval_every = 2
wall_clock = false
{extra}
"#,
        dir.display()
    );
    RunConfig::from_toml_str(&text).unwrap()
}

#[test]
fn zero_step_pretrain_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "");
    cfg.pretrain.steps = 0;
    run_pretrain(&cfg).unwrap();
    let saved = load_checkpoint(&tmp.path().join("model.ckpt")).unwrap();
    let init = VelocityModel::xavier(cfg.arch.clone(), &mut SeedStream::new(cfg.seed).stream(tag::INIT, 0));
    assert_eq!(
        saved.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
        init.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn pretrain_logs_on_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let (task, _) = cfg.validate().unwrap();
    let mut steps = Vec::new();
    let mut pcfg = cfg.pretrain.clone();
    pcfg.steps = 12;
    pretrain_model(&task, &cfg.arch, &pcfg, SeedStream::new(1), |m| {
        assert!(m.loss.is_finite());
        steps.push(m.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, vec![5, 10, 12]);
}

#[test]
fn same_seed_gives_identical_metrics_files() {
    let run = |dir: &Path| {
        let cfg = config(dir, "");
        run_pretrain(&cfg).unwrap();
        run_finetune(&cfg, Algo::Advflow, &dir.join("model.ckpt")).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    for name in [
        "pretrain_metrics.csv",
        "pretrain_metrics.jsonl",
        "metrics.csv",
        "metrics.jsonl",
        "model.ckpt",
        "learned.ckpt",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn finetune_writes_its_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    run_pretrain(&cfg).unwrap();
    let summary = run_finetune(&cfg, Algo::Advflow, &tmp.path().join("model.ckpt")).unwrap();
    assert_eq!(summary.iterations, 6);
    for name in [
        "config.toml",
        "metrics.csv",
        "metrics.jsonl",
        "learned.ckpt",
        "rollout.ckpt",
        "finetune_summary.json",
    ] {
        assert!(tmp.path().join(name).exists(), "{name}");
    }
    let text = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text
        .lines()
        .next()
        .unwrap()
        .starts_with("iter,wall_s,mean_reward,eval_reward"));
    let q = (summary.min_quad_coeff.unwrap(), summary.max_quad_coeff.unwrap());
    assert!(q.0 >= 0.101 - 1e-12 && q.1 <= 2.101 + 1e-12, "{q:?}");
    let again = RunConfig::from_toml_str(&fs::read_to_string(tmp.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn grpo_refuses_the_ode_sampler() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    run_pretrain(&cfg).unwrap();
    match run_finetune(&cfg, Algo::Grpo, &tmp.path().join("model.ckpt")) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "train.sampler.mode"),
        other => panic!("expected config error, got {other:?}"),
    }
    let sde = config(tmp.path(), "\n[train.sampler]\nmode = \"sde\"\nsteps = 5\n");
    run_finetune(&sde, Algo::Grpo, &tmp.path().join("model.ckpt")).unwrap();
}

#[test]
fn architecture_mismatch_is_a_checkpoint_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let other = VelocityModel::zeros(ArchSpec::new(2, 0, vec![4], Activation::Tanh));
    let path = tmp.path().join("other.ckpt");
    save_checkpoint(&other, &path).unwrap();
    assert!(matches!(
        run_finetune(&cfg, Algo::Advflow, &path),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(run_eval(&cfg, &path, 10, 5), Err(Error::Checkpoint(_))));
}

#[test]
fn eval_needs_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let task = Task::new(cfg.task.clone()).unwrap();
    let model = VelocityModel::zeros(cfg.arch.clone());
    assert!(matches!(
        eval_report(&model, &task, 0, &SamplerConfig::ode(5), SeedStream::new(0)),
        Err(Error::Input(_))
    ));
}

#[test]
fn untrained_symmetric_model_scores_one_half() {
    // A zero velocity field leaves the standard normal prior in place, so the
    // right half-plane carries half the mass.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let task = Task::new(cfg.task.clone()).unwrap();
    let model = VelocityModel::zeros(cfg.arch.clone());
    let r = eval_report(&model, &task, 4000, &SamplerConfig::ode(10), SeedStream::new(2)).unwrap();
    assert!((r.total.mean - 0.5).abs() <= 2.0 * r.total.ci95, "{r:?}");
    assert_eq!(r.components.len(), 1);
    assert!((r.mode_masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn unwritable_output_dir_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let cfg = config(&blocker.join("sub"), "");
    assert!(matches!(run_pretrain(&cfg), Err(Error::Io { .. })));
}

#[test]
fn output_dir_override_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(Path::new("/nonexistent/never"), "");
    let path = tmp.path().join("run.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();
    // Only this test touches the variable.
    unsafe { std::env::set_var(advflow::harness::OUTPUT_DIR_ENV, tmp.path().join("override")) };
    let loaded = RunConfig::load(&path).unwrap();
    unsafe { std::env::remove_var(advflow::harness::OUTPUT_DIR_ENV) };
    assert_eq!(loaded.output_dir, tmp.path().join("override"));
}

#[test]
fn compare_identical_runs_and_unreached_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    run_pretrain(&cfg).unwrap();
    run_finetune(&cfg, Algo::Advflow, &tmp.path().join("model.ckpt")).unwrap();
    let curve = load_run(tmp.path()).unwrap();
    let threshold = curve
        .metrics
        .iter()
        .filter_map(|m| m.eval_reward)
        .fold(f64::INFINITY, f64::min);
    let s = compare_runs(&curve, &curve, threshold);
    assert_eq!(s.iter_ratio, Ratio::Value(1.0));
    let s = compare_runs(&curve, &curve, 2.0);
    assert!(matches!(s.iter_ratio, Ratio::Missing(ref m) if m == "not reached"));

    let out = tmp.path().join("cmp");
    run_compare(tmp.path(), &tmp.path().join("config.toml"), 2.0, &out).unwrap();
    for name in ["compare_by_iter.csv", "compare_by_time.csv", "compare_summary.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let json = fs::read_to_string(out.join("compare_summary.json")).unwrap();
    assert!(json.contains("\"not reached\""), "{json}");
    assert!(matches!(load_run(&tmp.path().join("missing")), Err(Error::Input(_))));
}
