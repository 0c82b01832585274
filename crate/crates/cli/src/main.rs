use std::path::PathBuf;
use std::process::ExitCode;

use advflow::harness::{self, Algo, RunConfig, VerifyOptions};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Advantage-weighted flow-matching experiments on toy tasks.
#[derive(Parser)]
#[command(name = "advflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Advflow,
    Grpo,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Advflow => Algo::Advflow,
            AlgoArg::Grpo => Algo::Grpo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    GradientSign,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining on the task's data distribution.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reward finetuning of a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "advflow")]
        algo: AlgoArg,
        /// Defaults to `model.ckpt` in the config's output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the numerical self-checks; exits nonzero if any fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Align two finetune runs by iteration and by wall-clock time.
    Compare {
        /// Run directory or config file.
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
    },
    /// Reward statistics of a checkpoint on the config's task.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 40)]
        steps: usize,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load(&config)?;
            print_json(&harness::run_pretrain(&cfg)?);
        }
        Command::Finetune {
            config,
            algo,
            checkpoint,
        } => {
            let cfg = load(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
            let summary = harness::run_finetune(&cfg, algo.into(), &ckpt)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&summary);
        }
        Command::Verify {
            seed,
            trials,
            report,
            inject_fault,
        } => {
            let opts = VerifyOptions {
                seed,
                rao_blackwell_trials: trials,
                flip_gradient_sign: matches!(inject_fault, Some(Fault::GradientSign)),
                ..VerifyOptions::default()
            };
            let results = harness::run_verify(&opts)?;
            let text = serde_json::to_string_pretty(&results)?;
            match report {
                Some(path) => {
                    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?
                }
                None => println!("{text}"),
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.pass).collect();
            for r in &failed {
                eprintln!("FAILED {}: {} > {}", r.check_name, r.value, r.bound);
            }
            if !failed.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Compare { a, b, threshold, out } => {
            print_json(&harness::run_compare(&a, &b, threshold, &out)?);
        }
        Command::Eval {
            config,
            checkpoint,
            samples,
            steps,
        } => {
            let cfg = load(&config)?;
            print_json(&harness::run_eval(&cfg, &checkpoint, samples, steps)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
