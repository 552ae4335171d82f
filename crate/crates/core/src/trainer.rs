//! Training loop shared by every method.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::crpo::{
    compute_weights, crpo_loss_grad, dapo_filter, grpo_loss_grad, maybe_denoise_with,
    resample_baseline, rollout_group, DenoiseSettings, LossOutput, LossSettings, Pruner,
    RolloutGroup,
};
use crate::env::{generate_instance, Instance};
use crate::error::{ConfigError, TrainError};
use crate::optim::Adam;
use crate::policy::{token_entropy, PolicyParams};
use crate::rng::{derive_rng_for, Purpose, NON_STEP};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Initial parameters, which also serve as the frozen reference policy.
pub fn initial_params(config: &ExperimentConfig) -> Result<PolicyParams, TrainError> {
    let mut rng = derive_rng_for(config.seed, NON_STEP, 0, Purpose::Init);
    Ok(PolicyParams::random(config.policy(), config.init_scale, &mut rng)?)
}

/// The `index`-th prompt of training step `step`; identical across methods.
pub fn batch_instance(config: &ExperimentConfig, step: u64, index: usize) -> Result<Instance, TrainError> {
    let mut rng = derive_rng_for(config.seed, step, index as u64, Purpose::Instance);
    Ok(generate_instance(&config.task(), &mut rng)?)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub theta: PolicyParams,
    pub reference: PolicyParams,
    pub old: PolicyParams,
    pub optimizer: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig) -> Result<Self, TrainError> {
        let theta = initial_params(config)?;
        Ok(Self {
            reference: theta.clone(),
            old: theta.clone(),
            optimizer: Adam::new(theta.flat().len(), config.learning_rate),
            theta,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub zero_reward_ratio: f64,
    pub bin_failure: usize,
    pub bin_mid: usize,
    pub bin_high: usize,
    pub mean_entropy: f64,
    pub mean_response_length: f64,
    pub denoise_trigger_count: usize,
    pub gate_success_count: usize,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,mean_reward,zero_reward_ratio,bin_failure,bin_mid,bin_high,mean_entropy,mean_response_length,denoise_trigger_count,gate_success_count,wall_ms";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.zero_reward_ratio,
            self.bin_failure,
            self.bin_mid,
            self.bin_high,
            self.mean_entropy,
            self.mean_response_length,
            self.denoise_trigger_count,
            self.gate_success_count,
            self.wall_ms
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            mean_reward: f[1].parse().ok()?,
            zero_reward_ratio: f[2].parse().ok()?,
            bin_failure: f[3].parse().ok()?,
            bin_mid: f[4].parse().ok()?,
            bin_high: f[5].parse().ok()?,
            mean_entropy: f[6].parse().ok()?,
            mean_response_length: f[7].parse().ok()?,
            denoise_trigger_count: f[8].parse().ok()?,
            gate_success_count: f[9].parse().ok()?,
            wall_ms: f[10].parse().ok()?,
        })
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(MetricsRow::HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

/// Parses a metrics file; `None` on a malformed header or row.
pub fn parse_metrics_csv(text: &str) -> Option<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next()? != MetricsRow::HEADER {
        return None;
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse_csv_line).collect()
}

/// Counts of groups with `ā = 0`, `0 < ā ≤ 0.5` and `ā > 0.5`.
pub fn bin_groups(a_bars: &[f64]) -> (usize, usize, usize) {
    let mut bins = (0, 0, 0);
    for &a in a_bars {
        if a <= 0.0 {
            bins.0 += 1;
        } else if a <= 0.5 {
            bins.1 += 1;
        } else {
            bins.2 += 1;
        }
    }
    bins
}

/// Mean of `values[end + 1 - window ..= end]`.
pub fn window_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let slice = &values[end + 1 - window..=end];
    slice.iter().sum::<f64>() / window as f64
}

/// First step whose trailing `window`-step mean reward reaches `target`.
/// A tolerance of 1e-12 absorbs summation rounding.
pub fn steps_to_threshold(metrics: &[MetricsRow], target: f64, window: usize) -> Option<u64> {
    assert!(window >= 1, "window must be at least 1");
    let rewards: Vec<f64> = metrics.iter().map(|r| r.mean_reward).collect();
    (window - 1..rewards.len())
        .find(|&i| window_mean(&rewards, i, window) >= target - 1e-12)
        .map(|i| metrics[i].step)
}

/// Largest trailing-window mean reward, or `None` for fewer than `window` rows.
pub fn peak_window_reward(metrics: &[MetricsRow], window: usize) -> Option<f64> {
    let rewards: Vec<f64> = metrics.iter().map(|r| r.mean_reward).collect();
    (window.max(1) - 1..rewards.len())
        .map(|i| window_mean(&rewards, i, window.max(1)))
        .reduce(f64::max)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub metrics: Vec<MetricsRow>,
    pub final_params: PolicyParams,
    pub reference: PolicyParams,
    pub clamp_events: usize,
}

/// Result of one (possibly aborted) run: the completed rows are kept either way.
#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRow>,
    pub result: Result<TrainRun, TrainError>,
}

struct StepGroups {
    groups: Vec<RolloutGroup>,
    a_bars: Vec<f64>,
    entropy: f64,
    response_length: f64,
}

fn build_groups(config: &ExperimentConfig, state: &TrainState, step: u64) -> Result<StepGroups, TrainError> {
    let settings = DenoiseSettings {
        tau: config.tau,
        gamma: config.gamma,
        group_size: config.group_size,
        max_len: config.max_response_len,
    };
    let one = |i: usize| -> Result<(RolloutGroup, f64, f64), TrainError> {
        let inst = batch_instance(config, step, i)?;
        let mut rng = derive_rng_for(config.seed, step, i as u64, Purpose::Rollout);
        let group = rollout_group(
            &state.old,
            &inst,
            config.group_size,
            config.max_response_len,
            &mut rng,
        );
        let entropy = token_entropy(&state.old, inst.prompt.tokens());
        let length = group.rollouts.iter().map(|r| r.response.len()).sum::<usize>() as f64
            / group.len() as f64;
        let mut rng = derive_rng_for(config.seed, step, i as u64, Purpose::Denoise);
        let pruner = match config.method {
            Method::Lens => Some(Pruner::Interference),
            Method::RandomPrune => Some(Pruner::Random),
            Method::GradPrune => Some(Pruner::Gradient),
            Method::Grpo | Method::DapoFilter | Method::Resample => None,
        };
        let group = match (config.method, pruner) {
            (_, Some(p)) => maybe_denoise_with(p, &state.old, &state.reference, group, &settings, &mut rng)?,
            (Method::Resample, None) if group.a_bar < config.tau => resample_baseline(
                &state.old,
                group,
                config.group_size,
                config.max_response_len,
                &mut rng,
            ),
            _ => group,
        };
        Ok((group, entropy, length))
    };
    let results: Vec<Result<_, TrainError>> = if config.parallel {
        (0..config.batch_size).into_par_iter().map(one).collect()
    } else {
        (0..config.batch_size).map(one).collect()
    };
    let mut groups = Vec::with_capacity(config.batch_size);
    let (mut entropy, mut length) = (0.0, 0.0);
    for r in results {
        let (g, e, l) = r?;
        entropy += e;
        length += l;
        groups.push(g);
    }
    let n = config.batch_size as f64;
    Ok(StepGroups {
        a_bars: groups.iter().map(|g| g.a_bar).collect(),
        groups,
        entropy: entropy / n,
        response_length: length / n,
    })
}

fn method_loss(
    config: &ExperimentConfig,
    state: &TrainState,
    groups: Vec<RolloutGroup>,
) -> Result<Option<LossOutput>, crate::error::LossError> {
    let settings = LossSettings {
        clip_eps: config.clip_eps,
        beta: config.beta,
        sigma_eps: config.sigma_eps,
        normalized_surrogate_weights: config.normalized_surrogate_weights,
        parallel: config.parallel,
    };
    match config.method {
        Method::Grpo => grpo_loss_grad(&state.theta, &state.reference, &groups, &settings).map(Some),
        Method::DapoFilter => {
            let kept = dapo_filter(groups);
            if kept.is_empty() {
                return Ok(None);
            }
            grpo_loss_grad(&state.theta, &state.reference, &kept, &settings).map(Some)
        }
        Method::Lens | Method::Resample | Method::RandomPrune | Method::GradPrune => {
            let weighted: Vec<_> = groups
                .into_iter()
                .map(|g| compute_weights(g, config.uniform_weights))
                .collect();
            crpo_loss_grad(&state.theta, &state.reference, &weighted, &settings).map(Some)
        }
    }
}

/// One iteration: snapshot, rollouts, method-specific groups, one update.
pub fn train_step(
    config: &ExperimentConfig,
    state: &mut TrainState,
    clamp_events: &mut usize,
) -> Result<MetricsRow, TrainError> {
    let started = Instant::now();
    let step = state.step + 1;
    state.old = state.theta.clone();
    let built = build_groups(config, state, step)?;
    let groups = built.groups;
    let denoise_trigger_count = groups.iter().filter(|g| g.denoised_prompt.is_some()).count();
    let gate_success_count = groups.iter().filter(|g| g.gate).count();

    let loss = method_loss(config, state, groups).map_err(|source| TrainError::Loss { step, source })?;
    if let Some(out) = loss {
        if !out.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        if out.clamp_events > 0 {
            log::warn!("step {step}: {} log-ratio clamp events", out.clamp_events);
        }
        *clamp_events += out.clamp_events;
        state.optimizer.step(state.theta.flat_mut(), &out.grad);
        state.theta.check_finite()?;
        log::debug!("step {step}: loss {}", out.loss);
    } else {
        log::debug!("step {step}: no informative groups, update skipped");
    }
    state.step = step;

    let (bin_failure, bin_mid, bin_high) = bin_groups(&built.a_bars);
    let n = built.a_bars.len() as f64;
    Ok(MetricsRow {
        step,
        mean_reward: built.a_bars.iter().sum::<f64>() / n,
        zero_reward_ratio: bin_failure as f64 / n,
        bin_failure,
        bin_mid,
        bin_high,
        mean_entropy: built.entropy,
        mean_response_length: built.response_length,
        denoise_trigger_count,
        gate_success_count,
        wall_ms: if config.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

fn write_outputs(out_dir: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    checkpoint::write_atomic(&out_dir.join(METRICS_FILE), metrics_to_csv(rows).as_bytes())?;
    Ok(())
}

/// Runs `config.steps` iterations. With an output directory, the metrics CSV
/// and checkpoints are written there (the CSV also on abort).
pub fn train(config: &ExperimentConfig, out_dir: Option<&Path>) -> RunOutcome {
    let mut metrics = Vec::new();
    let result = run(config, out_dir, &mut metrics);
    if let (Some(dir), Err(_)) = (out_dir, &result) {
        if let Err(e) = write_outputs(dir, &metrics) {
            log::error!("writing partial metrics: {e}");
        }
    }
    RunOutcome { metrics, result }
}

fn run(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    metrics: &mut Vec<MetricsRow>,
) -> Result<TrainRun, TrainError> {
    config.validate().map_err(|v| TrainError::Config(ConfigError::Invalid(v)))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut state = TrainState::new(config)?;
    let mut clamp_events = 0;
    while state.step < config.steps {
        let row = train_step(config, &mut state, &mut clamp_events)?;
        log::info!(
            "step {} reward {:.4} zero {:.3} gates {}",
            row.step,
            row.mean_reward,
            row.zero_reward_ratio,
            row.gate_success_count
        );
        metrics.push(row);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                checkpoint::save(&state.theta, &dir.join(checkpoint_name(state.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&state.theta, &dir.join(FINAL_CHECKPOINT))?;
        write_outputs(dir, metrics)?;
    }
    if clamp_events > 0 {
        log::warn!("{clamp_events} log-ratio clamp events in total");
    }
    Ok(TrainRun {
        metrics: metrics.clone(),
        final_params: state.theta,
        reference: state.reference,
        clamp_events,
    })
}

/// Path of the metrics file inside a run directory.
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join(METRICS_FILE)
}
