use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use lenslab::checkpoint;
use lenslab::experiments::{self, GradcheckOptions, SweepParam};
use lenslab::trainer::{self, initial_params};
use lenslab::{ConfigError, ExperimentConfig, Method, PolicyParams, TrainError};

const EXIT_CONFIG: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "lenslab", version, about = "Prompt purification and calibrated rollout policy optimization on a toy retrieval task")]
struct Cli {
    /// Config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed or comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed.
    Train,
    /// Matched-seed comparison of methods.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "grpo,lens")]
        methods: Vec<String>,
    },
    /// Lens runs over a list of deletion ratios.
    SweepGamma {
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.03,0.04,0.05")]
        values: Vec<f64>,
    },
    /// Lens runs over a list of success-rate thresholds.
    SweepTau {
        #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.375,0.5")]
        values: Vec<f64>,
    },
    /// Per-position interference scores and their histogram.
    Diagnose {
        /// Policy checkpoint; the initial policy when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        prompts: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Purification quality on low-success prompts.
    PurifyEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        prompts: usize,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Added to one analytic gradient entry.
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
}

enum Failure {
    Config(anyhow::Error),
    Abort(anyhow::Error),
    Gradcheck,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => Failure::Config(c.into()),
            other => Failure::Abort(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Abort(e)
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        config.apply_override(o)?;
    }
    if let Some(&s) = cli.seed.first() {
        config.seed = s;
    }
    config.validated()
}

fn seeds(cli: &Cli, config: &ExperimentConfig) -> Vec<u64> {
    if cli.seed.is_empty() {
        vec![config.seed]
    } else {
        cli.seed.clone()
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn policy_for(config: &ExperimentConfig, ckpt: Option<&Path>) -> Result<(PolicyParams, PolicyParams), Failure> {
    let reference = initial_params(config)?;
    let theta = match ckpt {
        Some(path) => checkpoint::load(path, config.temperature)
            .with_context(|| format!("loading {}", path.display()))?,
        None => reference.clone(),
    };
    if theta.config() != reference.config() {
        return Err(Failure::Config(anyhow::anyhow!(
            "checkpoint shape {:?} does not match config {:?}",
            theta.config(),
            reference.config()
        )));
    }
    Ok((theta, reference))
}

fn aborted(runs: &[experiments::RunRecord]) -> Result<(), Failure> {
    let n = runs.iter().filter(|r| r.error.is_some()).count();
    if n > 0 {
        return Err(Failure::Abort(anyhow::anyhow!("{n} run(s) aborted")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = build_config(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Train => {
            let seeds = seeds(cli, &config);
            for &seed in &seeds {
                let mut cfg = config.clone();
                cfg.seed = seed;
                let dir = if seeds.len() == 1 {
                    out.clone()
                } else {
                    out.join(format!("seed{seed}"))
                };
                let outcome = trainer::train(&cfg, Some(&dir));
                let run = outcome.result?;
                let last = run.metrics.last();
                println!(
                    "seed {seed}: {} steps, final mean_reward {}, steps_to_threshold {}",
                    run.metrics.len(),
                    last.map_or(f64::NAN, |m| m.mean_reward),
                    trainer::steps_to_threshold(&run.metrics, cfg.threshold_target, cfg.threshold_window)
                        .map_or_else(|| "none".into(), |s| s.to_string())
                );
            }
        }
        Command::Compare { methods } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<Method>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Config(anyhow::anyhow!(e)))?;
            if methods.len() < 2 {
                return Err(Failure::Config(anyhow::anyhow!("compare needs at least two methods")));
            }
            let runs = experiments::compare(&config, &methods, &seeds(cli, &config), out)?;
            print!("{}", experiments::compare_summary_csv(&config, &methods, &runs));
            aborted(&runs)?;
        }
        Command::SweepGamma { values } | Command::SweepTau { values } => {
            let param = if matches!(cli.command, Command::SweepGamma { .. }) {
                SweepParam::Gamma
            } else {
                SweepParam::Tau
            };
            let runs = experiments::sweep(&config, param, values, &seeds(cli, &config), out)?;
            print!("{}", experiments::sweep_csv(&config, &runs));
            aborted(&runs)?;
        }
        Command::Diagnose {
            checkpoint,
            prompts,
            bins,
        } => {
            let (theta, reference) = policy_for(&config, checkpoint.as_deref())?;
            let (rows, hist) = experiments::diagnose(&theta, &reference, &config, *prompts, *bins)?;
            write(&out.join("diagnose.csv"), &rows)?;
            write(&out.join("score_histogram.csv"), &hist)?;
            print!("{hist}");
        }
        Command::PurifyEval { checkpoint, prompts } => {
            let (theta, reference) = policy_for(&config, checkpoint.as_deref())?;
            let report = experiments::purify_eval(&theta, &reference, &config, *prompts)?;
            write(&out.join("purify_eval.csv"), &report.rows_csv())?;
            write(&out.join("purify_eval_summary.csv"), &report.summary_csv())?;
            print!("{}", report.summary_csv());
        }
        Command::Gradcheck { instances, perturb } => {
            let options = GradcheckOptions {
                instances: *instances,
                perturb: *perturb,
                ..GradcheckOptions::default()
            };
            let report = experiments::gradcheck(&config, &options)?;
            write(&out.join("gradcheck.csv"), &report.to_csv())?;
            for r in &report.results {
                println!(
                    "{:<18} {} instances, max rel err {:.3e}{}",
                    r.operation,
                    r.instances,
                    r.max_rel_err,
                    if r.passed {
                        String::new()
                    } else {
                        format!("  FAILED (instance seed {})", r.worst_instance_seed)
                    }
                );
            }
            if !report.passed() {
                return Err(Failure::Gradcheck);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Abort(e)) => {
            eprintln!("run aborted: {e:#}");
            ExitCode::from(EXIT_ABORT)
        }
        Err(Failure::Gradcheck) => {
            eprintln!("gradient check failed");
            ExitCode::from(EXIT_GRADCHECK)
        }
    }
}
