use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn advflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advflow"))
        .args(args)
        .env_remove("ADVFLOW_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, output: &Path, extra: &str) -> String {
    let text = format!(
        r#"
seed = 9
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
hidden_widths = [8]

[pretrain]
steps = 10
batch_size = 8
eval_samples = 20
eval_steps = 4

[train]
prompts_per_batch = 2
samples_per_prompt = 4
iterations = 4
eval_samples = 20
eval_every = 2
wall_clock = false
{extra}
"#,
        output.display()
    );
    let path = dir.join(format!("run{}.toml", extra.len()));
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn verify_passes_and_matches_the_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.json");
    let out = advflow(&["verify", "--trials", "2000", "--report", report.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(include_str!("../schema/verify_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    assert!(report
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["pass"] == Value::Bool(true)));
}

#[test]
fn injected_gradient_fault_fails_a_named_check() {
    let out = advflow(&["verify", "--trials", "500", "--inject-fault", "gradient-sign"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("FAILED grad_check.flow_matching"), "{stderr}");
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let failed: Vec<&str> = report
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == Value::Bool(false))
        .map(|c| c["check_name"].as_str().unwrap())
        .collect();
    assert!(
        !failed.is_empty() && failed.iter().all(|n| n.starts_with("grad_check.")),
        "{failed:?}"
    );
}

#[test]
fn pretrain_finetune_eval_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &run, "");
    let summary = stdout_json(&advflow(&["pretrain", "--config", &cfg]));
    assert_eq!(summary["steps"], 10);
    assert!(run.join("model.ckpt").exists());

    let summary = stdout_json(&advflow(&["finetune", "--config", &cfg, "--algo", "advflow"]));
    assert_eq!(summary["iterations"], 4);
    assert!(run.join("learned.ckpt").exists());

    let ckpt = run.join("learned.ckpt");
    let report = stdout_json(&advflow(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--samples",
        "30",
        "--steps",
        "5",
    ]));
    assert_eq!(report["n_samples"], 30);
    assert_eq!(report["steps"], 5);

    let out_dir = tmp.path().join("cmp");
    let summary = stdout_json(&advflow(&[
        "compare",
        run.to_str().unwrap(),
        &cfg,
        "--threshold",
        "1.5",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(summary["time_ratio"], "not reached");
    assert!(out_dir.join("compare_by_iter.csv").exists());
}

#[test]
fn grpo_on_ode_sampler_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &run, "");
    stdout_json(&advflow(&["pretrain", "--config", &cfg]));
    let out = advflow(&["finetune", "--config", &cfg, "--algo", "grpo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.sampler.mode"));
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("run"), "rho = 1.5");
    let out = advflow(&["pretrain", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.rho"));
}

#[test]
fn missing_metrics_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = advflow(&["compare", dir, dir, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        advflow::harness::RunConfig::from_toml_str(&text)
            .and_then(|c| c.validate())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 4);
}
