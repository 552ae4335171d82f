//! Multi-run experiments and diagnostics that emit CSV files.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::write_atomic;
use crate::config::{ExperimentConfig, Method};
use crate::crpo::{
    compute_weights, crpo_loss_grad, grpo_loss_grad, maybe_denoise, rollout_group, DenoiseSettings,
    LossSettings, RolloutGroup, WeightedGroup,
};
use crate::env::{generate_instance, TaskConfig};
use crate::error::TrainError;
use crate::interference::{
    interference_scores, random_prune_positions, remove_positions, select_interference_set,
};
use crate::policy::{
    grad_sequence_log_prob, sample_response, sequence_log_prob, PolicyConfig, PolicyParams,
};
use crate::rng::{derive_rng_for, Purpose, NON_STEP};
use crate::trainer::{peak_window_reward, steps_to_threshold, train, MetricsRow};
use crate::types::{TokenId, VocabLayout};

/// One finished or aborted training run inside a multi-run command.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    /// Swept value, if any.
    pub value: Option<f64>,
    pub metrics: Vec<MetricsRow>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn status(&self) -> &'static str {
        if self.error.is_some() {
            "aborted"
        } else {
            "ok"
        }
    }
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Median with `None` ordered above every value; an even count averages the
/// two middle entries and is `None` if either is.
pub fn median_steps(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.cmp(y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        match (v[n / 2 - 1], v[n / 2]) {
            (Some(a), Some(b)) => Some((a as f64 + b as f64) / 2.0),
            _ => None,
        }
    }
}

pub fn median_f64(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn run_dir_name(method: Method, seed: u64) -> String {
    format!("{}_seed{}", method.name(), seed)
}

fn run_cells(cells: Vec<(ExperimentConfig, Option<f64>, std::path::PathBuf)>) -> Vec<RunRecord> {
    cells
        .into_par_iter()
        .map(|(cfg, value, dir)| {
            let outcome = train(&cfg, Some(&dir));
            let error = outcome.result.err().map(|e| {
                log::error!("{} seed {}: {e}", cfg.method, cfg.seed);
                e.to_string()
            });
            RunRecord {
                method: cfg.method,
                seed: cfg.seed,
                value,
                metrics: outcome.metrics,
                error,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "method,seed,status,steps_to_threshold,peak_window_reward,final_mean_reward";

/// Summary CSV: one row per run, then one `median` row per method.
pub fn compare_summary_csv(config: &ExperimentConfig, methods: &[Method], runs: &[RunRecord]) -> String {
    let target = config.threshold_target;
    let window = config.threshold_window;
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.seed,
            r.status(),
            fmt_opt(steps_to_threshold(&r.metrics, target, window)),
            fmt_opt(peak_window_reward(&r.metrics, window)),
            fmt_opt(r.metrics.last().map(|m| m.mean_reward)),
        );
    }
    for &method in methods {
        let done: Vec<&RunRecord> = runs
            .iter()
            .filter(|r| r.method == method && r.error.is_none())
            .collect();
        let steps: Vec<Option<u64>> = done
            .iter()
            .map(|r| steps_to_threshold(&r.metrics, target, window))
            .collect();
        let peaks: Vec<f64> = done
            .iter()
            .filter_map(|r| peak_window_reward(&r.metrics, window))
            .collect();
        let finals: Vec<f64> = done
            .iter()
            .filter_map(|r| r.metrics.last().map(|m| m.mean_reward))
            .collect();
        let _ = writeln!(
            out,
            "{},median,{},{},{},{}",
            method,
            done.len(),
            fmt_opt(median_steps(&steps)),
            fmt_opt(median_f64(&peaks)),
            fmt_opt(median_f64(&finals)),
        );
    }
    out
}

/// Runs every (method, seed) cell. Instance streams depend only on the
/// seed, so the t-th batch is shared by all methods.
pub fn compare(
    config: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<RunRecord>, TrainError> {
    let mut cells = Vec::new();
    for &method in methods {
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.method = method;
            cfg.seed = seed;
            let cfg = cfg.validated()?;
            cells.push((cfg, None, out_dir.join("runs").join(run_dir_name(method, seed))));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let runs = run_cells(cells);
    write_atomic(
        &out_dir.join("summary.csv"),
        compare_summary_csv(config, methods, &runs).as_bytes(),
    )?;
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Tau => "tau",
        }
    }
}

pub const SWEEP_HEADER: &str = "value,seed,status,final_mean_reward,peak_window_reward";

pub fn sweep_csv(config: &ExperimentConfig, runs: &[RunRecord]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_opt(r.value),
            r.seed,
            r.status(),
            fmt_opt(r.metrics.last().map(|m| m.mean_reward)),
            fmt_opt(peak_window_reward(&r.metrics, config.threshold_window)),
        );
    }
    out
}

/// Runs lens at every value of γ or τ for every seed. All configurations
/// are validated before the first run starts.
pub fn sweep(
    config: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<RunRecord>, TrainError> {
    let mut cells = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.method = Method::Lens;
            cfg.seed = seed;
            match param {
                SweepParam::Gamma => cfg.gamma = value,
                SweepParam::Tau => cfg.tau = value,
            }
            let cfg = cfg.validated()?;
            let dir = out_dir
                .join("runs")
                .join(format!("{}_{}_seed{}", param.name(), value, seed));
            cells.push((cfg, Some(value), dir));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let runs = run_cells(cells);
    write_atomic(
        &out_dir.join(format!("sweep_{}.csv", param.name())),
        sweep_csv(config, &runs).as_bytes(),
    )?;
    Ok(runs)
}

/// Evaluation prompt `j`, drawn from streams disjoint from training.
fn eval_instance(config: &ExperimentConfig, j: usize) -> Result<crate::env::Instance, TrainError> {
    let mut rng = derive_rng_for(config.seed, NON_STEP, j as u64, Purpose::Eval);
    Ok(generate_instance(&config.task(), &mut rng)?)
}

/// Per-position interference scores for `n_prompts` evaluation prompts and a
/// histogram of all scores.
pub fn diagnose(
    theta: &PolicyParams,
    reference: &PolicyParams,
    config: &ExperimentConfig,
    n_prompts: usize,
    bins: usize,
) -> Result<(String, String), TrainError> {
    let mut rows = String::from("prompt_id,position,token_id,score,is_distractor,selected\n");
    let mut all_scores = Vec::new();
    for j in 0..n_prompts {
        let inst = eval_instance(config, j)?;
        let scores = interference_scores(theta, reference, &inst.prompt)?;
        let profile = select_interference_set(&scores, config.gamma);
        let mask = inst.prompt.distractor_mask().unwrap_or(&[]);
        for (pos, (&tok, &score)) in inst.prompt.tokens().iter().zip(&scores).enumerate() {
            let _ = writeln!(
                rows,
                "{},{},{},{},{},{}",
                j,
                pos,
                tok,
                score,
                mask.get(pos).copied().unwrap_or(false) as u8,
                profile.selected.binary_search(&pos).is_ok() as u8
            );
        }
        all_scores.extend(scores);
    }
    Ok((rows, score_histogram(&all_scores, bins)))
}

/// Equal-width histogram over `[0, max score]`.
pub fn score_histogram(scores: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let max = scores.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max } else { 1.0 } / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let b = ((s / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i as f64 * width, (i + 1) as f64 * width, c);
    }
    out
}

/// Random-prune draws per evaluated prompt for the precision control.
pub const CONTROL_DRAWS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PurifyRow {
    pub prompt_id: usize,
    pub length: usize,
    pub distractors: usize,
    pub k: usize,
    pub original_acc: f64,
    pub denoised_acc: Option<f64>,
    pub selected_distractors: usize,
    pub random_selected: usize,
    pub random_selected_distractors: usize,
}

impl PurifyRow {
    pub fn evaluated(&self) -> bool {
        self.denoised_acc.is_some()
    }

    pub fn improved(&self) -> bool {
        self.denoised_acc.is_some_and(|d| d > self.original_acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurifyReport {
    pub rows: Vec<PurifyRow>,
    pub evaluated: usize,
    pub skipped_degenerate: usize,
    pub fraction_improved: f64,
    pub mean_improvement: f64,
    pub selected_positions: usize,
    pub precision: f64,
    pub random_selected_positions: usize,
    pub random_precision: f64,
    pub random_precision_se: f64,
    pub base_rate: f64,
}

impl PurifyReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "prompt_id,length,distractors,k,original_acc,denoised_acc,improved,selected_distractors,random_selected,random_selected_distractors\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.prompt_id,
                r.length,
                r.distractors,
                r.k,
                r.original_acc,
                fmt_opt(r.denoised_acc),
                r.improved() as u8,
                r.selected_distractors,
                r.random_selected,
                r.random_selected_distractors
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let pairs: [(&str, String); 10] = [
            ("evaluated", self.evaluated.to_string()),
            ("skipped_degenerate", self.skipped_degenerate.to_string()),
            ("fraction_improved", self.fraction_improved.to_string()),
            ("mean_improvement", self.mean_improvement.to_string()),
            ("selected_positions", self.selected_positions.to_string()),
            ("precision", self.precision.to_string()),
            ("random_selected_positions", self.random_selected_positions.to_string()),
            ("random_precision", self.random_precision.to_string()),
            ("random_precision_se", self.random_precision_se.to_string()),
            ("base_rate", self.base_rate.to_string()),
        ];
        let mut out = String::from("metric,value\n");
        for (k, v) in pairs {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Purification quality on `n_prompts` evaluation prompts whose Average@m
/// under `theta` is below τ. Each evaluated prompt also gets
/// [`CONTROL_DRAWS`] random prunes of the same size as a precision control.
pub fn purify_eval(
    theta: &PolicyParams,
    reference: &PolicyParams,
    config: &ExperimentConfig,
    n_prompts: usize,
) -> Result<PurifyReport, TrainError> {
    let m = config.group_size;
    let max_len = config.max_response_len;
    let max_attempts = n_prompts.saturating_mul(50).max(100);
    let mut rows = Vec::new();
    let mut skipped_degenerate = 0;
    let mut j = 0;
    while rows.len() + skipped_degenerate < n_prompts && j < max_attempts {
        let inst = eval_instance(config, j)?;
        let mut rng = derive_rng_for(config.seed, NON_STEP, j as u64, Purpose::Rollout);
        let original = rollout_group(theta, &inst, m, max_len, &mut rng);
        let prompt_id = j;
        j += 1;
        if original.a_bar >= config.tau {
            continue;
        }
        let profile = select_interference_set(&interference_scores(theta, reference, &inst.prompt)?, config.gamma);
        if profile.degenerate || profile.k == 0 || profile.k >= inst.prompt.len() {
            skipped_degenerate += 1;
            continue;
        }
        let mask = inst.prompt.distractor_mask().unwrap_or(&[]);
        let is_d = |p: &usize| mask.get(*p).copied().unwrap_or(false);
        let denoised = remove_positions(&inst.prompt, &profile.selected)?;
        let mut rng = derive_rng_for(config.seed, NON_STEP, prompt_id as u64, Purpose::Denoise);
        let hits = (0..m)
            .filter(|_| {
                let y = sample_response(theta, &denoised, max_len, &mut rng);
                crate::env::verify(&y, &inst) > 0.0
            })
            .count();
        let mut rng = derive_rng_for(config.seed, NON_STEP, prompt_id as u64, Purpose::Control);
        let mut random_selected = 0;
        let mut random_selected_distractors = 0;
        for _ in 0..CONTROL_DRAWS {
            let picked = random_prune_positions(inst.prompt.len(), config.gamma, &mut rng);
            random_selected += picked.len();
            random_selected_distractors += picked.iter().filter(|p| is_d(p)).count();
        }
        rows.push(PurifyRow {
            prompt_id,
            length: inst.prompt.len(),
            distractors: inst.prompt.distractor_count(),
            k: profile.k,
            original_acc: original.a_bar,
            denoised_acc: Some(hits as f64 / m as f64),
            selected_distractors: profile.selected.iter().filter(|p| is_d(p)).count(),
            random_selected,
            random_selected_distractors,
        });
    }
    let evaluated = rows.len();
    let improved = rows.iter().filter(|r| r.improved()).count();
    let improvement: f64 = rows
        .iter()
        .map(|r| r.denoised_acc.unwrap_or(r.original_acc) - r.original_acc)
        .sum();
    let selected: usize = rows.iter().map(|r| r.k).sum();
    let selected_d: usize = rows.iter().map(|r| r.selected_distractors).sum();
    let rand_sel: usize = rows.iter().map(|r| r.random_selected).sum();
    let rand_d: usize = rows.iter().map(|r| r.random_selected_distractors).sum();
    let random_precision = ratio(rand_d, rand_sel);
    let random_precision_se = if rand_sel > 0 {
        (random_precision * (1.0 - random_precision) / rand_sel as f64).sqrt()
    } else {
        0.0
    };
    let tokens: usize = rows.iter().map(|r| r.length).sum();
    let distractors: usize = rows.iter().map(|r| r.distractors).sum();
    Ok(PurifyReport {
        evaluated,
        skipped_degenerate,
        fraction_improved: ratio(improved, evaluated),
        mean_improvement: if evaluated > 0 {
            improvement / evaluated as f64
        } else {
            0.0
        },
        selected_positions: selected,
        precision: ratio(selected_d, selected),
        random_selected_positions: rand_sel,
        random_precision,
        random_precision_se,
        base_rate: ratio(distractors, tokens),
        rows,
    })
}

/// Relative-error floor: differences on gradient entries smaller than this
/// are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `params`.
pub fn numeric_gradient(
    params: &PolicyParams,
    mut f: impl FnMut(&PolicyParams) -> f64,
) -> Vec<f64> {
    let mut work = params.clone();
    (0..params.flat().len())
        .map(|i| {
            let x = params.flat()[i];
            work.flat_mut()[i] = x + FD_STEP;
            let up = f(&work);
            work.flat_mut()[i] = x - FD_STEP;
            let down = f(&work);
            work.flat_mut()[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub tolerance: f64,
    /// Added to the first analytic gradient entry; fault injection for tests.
    pub perturb: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            tolerance: 1e-4,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub operation: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst_instance_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<GradcheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("operation,instances,max_rel_err,worst_instance_seed,passed\n");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.operation, r.instances, r.max_rel_err, r.worst_instance_seed, r.passed as u8
            );
        }
        out
    }
}

/// Small problem used by the finite-difference checks: V = 8, d ≤ 4.
pub fn gradcheck_problem(config: &ExperimentConfig) -> (TaskConfig, PolicyConfig) {
    let vocab = VocabLayout::new(2, 1, 1).expect("fixed layout");
    let policy = PolicyConfig {
        vocab_size: vocab.vocab_size(),
        embed_dim: config.embed_dim.clamp(1, 4),
        window: config.window.clamp(1, 4),
        temperature: config.temperature,
    };
    let task = TaskConfig {
        pairs: 1,
        distractor_rate: 0.5,
        vocab,
    };
    (task, policy)
}

fn perturbed(mut grad: Vec<f64>, by: f64) -> Vec<f64> {
    grad[0] += by;
    grad
}

/// A random batch of groups for the loss checks, with `theta` moved away
/// from the behavior policy so that clipping engages.
pub struct LossProblem {
    pub theta: PolicyParams,
    pub reference: PolicyParams,
    pub groups: Vec<WeightedGroup>,
    pub settings: LossSettings,
}

/// Draws a loss problem for instance seed `s`. With `original_only`, no
/// denoising happens and weights are uniform.
pub fn loss_problem(config: &ExperimentConfig, s: u64, original_only: bool) -> Result<LossProblem, TrainError> {
    let (task, pcfg) = gradcheck_problem(config);
    let mut rng = derive_rng_for(config.seed, NON_STEP, s, Purpose::Control);
    let old = PolicyParams::random(pcfg, 1.0, &mut rng)?;
    let reference = PolicyParams::random(pcfg, 1.0, &mut rng)?;
    let mut theta = old.clone();
    for x in theta.flat_mut() {
        *x += rng.gen_range(-0.15..0.15);
    }
    let m = rng.gen_range(2..=8);
    let n_groups = rng.gen_range(1..=3);
    let uniform = original_only || rng.gen_bool(0.3);
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let inst = generate_instance(&task, &mut rng)?;
        let group = rollout_group(&old, &inst, m, 3, &mut rng);
        let group = if original_only {
            group
        } else {
            let settings = DenoiseSettings {
                tau: 1.0,
                gamma: 0.3,
                group_size: m,
                max_len: 3,
            };
            maybe_denoise(&old, &reference, group, &settings, &mut rng)?
        };
        groups.push(compute_weights(group, uniform));
    }
    let settings = LossSettings {
        clip_eps: config.clip_eps,
        beta: if config.beta > 0.0 { config.beta.max(0.05) } else { 0.05 },
        sigma_eps: config.sigma_eps,
        normalized_surrogate_weights: !original_only && rng.gen_bool(0.5),
        parallel: false,
    };
    Ok(LossProblem {
        theta,
        reference,
        groups,
        settings,
    })
}

/// True when some rollout's ratio sits within `margin` of a clip edge, where
/// a finite difference could straddle the kink.
pub fn near_kink(problem: &LossProblem, margin: f64) -> bool {
    problem.groups.iter().any(|wg| {
        wg.group.rollouts.iter().any(|r| {
            let lp = sequence_log_prob(&problem.theta, wg.group.prompt(), &r.response).unwrap_or(0.0);
            let ratio = (lp - r.behavior_log_prob).exp();
            let eps = problem.settings.clip_eps;
            (ratio - (1.0 - eps)).abs() < margin || (ratio - (1.0 + eps)).abs() < margin
        })
    })
}

fn raw_groups(groups: &[WeightedGroup]) -> Vec<RolloutGroup> {
    groups.iter().map(|wg| wg.group.clone()).collect()
}

/// Finite-difference checks of the sequence log-likelihood, the weighted
/// loss and the unweighted loss.
pub fn gradcheck(config: &ExperimentConfig, options: &GradcheckOptions) -> Result<GradcheckReport, TrainError> {
    let (task, pcfg) = gradcheck_problem(config);
    let mut results = Vec::new();

    let mut worst = (0.0, 0);
    for s in 0..options.instances as u64 {
        let mut rng = derive_rng_for(config.seed, NON_STEP, s, Purpose::Eval);
        let params = PolicyParams::random(pcfg, 1.0, &mut rng)?;
        let inst = generate_instance(&task, &mut rng)?;
        let len = rng.gen_range(1..=4);
        let response: Vec<TokenId> = (0..len)
            .map(|_| TokenId(rng.gen_range(0..pcfg.vocab_size as u32)))
            .collect();
        let analytic = perturbed(grad_sequence_log_prob(&params, &inst.prompt, &response)?, options.perturb);
        let numeric = numeric_gradient(&params, |p| {
            sequence_log_prob(p, &inst.prompt, &response).expect("valid inputs")
        });
        let err = max_relative_error(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, s);
        }
    }
    results.push(GradcheckResult {
        operation: "sequence_log_prob",
        instances: options.instances,
        max_rel_err: worst.0,
        worst_instance_seed: worst.1,
        passed: worst.0 <= options.tolerance,
    });

    for (operation, original_only) in [("crpo_loss_grad", false), ("grpo_loss_grad", true)] {
        let mut worst = (0.0, 0);
        let mut checked = 0;
        let mut s = 0u64;
        while checked < options.instances {
            let problem = loss_problem(config, s, original_only)?;
            let seed = s;
            s += 1;
            if near_kink(&problem, 1e-4) {
                continue;
            }
            checked += 1;
            let eval = |p: &PolicyParams| -> Result<(f64, Vec<f64>), TrainError> {
                let out = if original_only {
                    grpo_loss_grad(p, &problem.reference, &raw_groups(&problem.groups), &problem.settings)
                } else {
                    crpo_loss_grad(p, &problem.reference, &problem.groups, &problem.settings)
                }
                .map_err(|source| TrainError::Loss { step: 0, source })?;
                Ok((out.loss, out.grad))
            };
            let analytic = perturbed(eval(&problem.theta)?.1, options.perturb);
            let numeric = numeric_gradient(&problem.theta, |p| eval(p).map(|o| o.0).unwrap_or(f64::NAN));
            let err = max_relative_error(&analytic, &numeric);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > worst.0 {
                worst = (err, seed);
            }
        }
        results.push(GradcheckResult {
            operation,
            instances: options.instances,
            max_rel_err: worst.0,
            worst_instance_seed: worst.1,
            passed: worst.0 <= options.tolerance,
        });
    }
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median_steps(&[Some(3), None, Some(1)]), Some(3.0));
        assert_eq!(median_steps(&[Some(3), Some(1)]), Some(2.0));
        assert_eq!(median_steps(&[Some(3), None]), None);
        assert_eq!(median_steps(&[]), None);
        assert_eq!(median_f64(&[0.5, 0.1, 0.3, 0.2]), Some(0.25));
    }

    #[test]
    fn histogram_counts_everything() {
        let h = score_histogram(&[0.0, 0.1, 0.5, 1.0, 1.0], 4);
        let total: usize = h
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 5);
        assert!(score_histogram(&[0.0; 3], 2).contains("0,0.5,3"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!((max_relative_error(&[1e-9], &[0.0]) - 1e-3).abs() < 1e-12);
    }
}
