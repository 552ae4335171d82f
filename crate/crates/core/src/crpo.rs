//! Calibrated rollout policy optimization and its baselines.
//!
//! Per prompt: sample `m` rollouts from the behavior policy; if the success
//! rate `ā` is below `τ`, purify the prompt, sample `m` more rollouts on the
//! purified prompt and, when that strictly raises the success rate, swap a
//! random subset of failures for the new successes. Every group is then
//! reweighted by `ā` (successes) and `1 − ā` (everything else), standardized
//! with the normalized weights, and fed into a sequence-level clipped
//! surrogate with an exact KL penalty toward the reference policy.
//!
//! The importance ratio of a rollout always puts the ORIGINAL prompt in the
//! numerator, `π_θ(y | x) / π_old(y | x_roll)`, so rollouts borrowed from a
//! purified prompt train the policy on the noisy prompt.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::env::{verify, Instance};
use crate::error::{InterferenceError, LossError};
use crate::interference::{
    gradient_prune_positions, remove_positions, saliency_unchecked,
    scores_unchecked, select_interference_set,
};
use crate::policy::{
    accumulate_sequence_grad, sample_response, sequence_log_prob, sequence_log_prob_unchecked,
    ContextEval, PolicyParams,
};
use crate::types::{Prompt, TokenId};

/// `|log ρ|` is clamped here before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

/// Which prompt a rollout was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptVariant {
    Original,
    Denoised,
}

/// Membership in the reconstructed group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Original success (Y⁺).
    Success,
    /// Original failure that was kept (Y⁻ \ R).
    Failure,
    /// Replacement success (P).
    Injected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub response: Vec<TokenId>,
    pub variant: PromptVariant,
    /// `log π_old(y | x_roll(y))`, frozen at sampling time.
    pub behavior_log_prob: f64,
    /// 0 or 1.
    pub reward: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub instance: Instance,
    pub denoised_prompt: Option<Prompt>,
    pub rollouts: Vec<Rollout>,
    /// Success rate of the original `m` rollouts. Never updated after
    /// replacement.
    pub a_bar: f64,
    pub gate: bool,
    pub denoised_acc: Option<f64>,
}

impl RolloutGroup {
    pub fn prompt(&self) -> &Prompt {
        &self.instance.prompt
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// All rollouts share one reward.
    pub fn is_zero_variance(&self) -> bool {
        match self.rollouts.first() {
            Some(first) => self.rollouts.iter().all(|r| r.reward == first.reward),
            None => true,
        }
    }

    pub fn injected_count(&self) -> usize {
        self.rollouts
            .iter()
            .filter(|r| r.origin == Origin::Injected)
            .count()
    }
}

/// A group with its raw (`w_tilde`) and normalized (`w`) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGroup {
    pub group: RolloutGroup,
    pub w_tilde: Vec<f64>,
    pub w: Vec<f64>,
}

fn sample_rollouts<R: Rng + ?Sized>(
    params: &PolicyParams,
    instance: &Instance,
    prompt: &Prompt,
    variant: PromptVariant,
    m: usize,
    max_len: usize,
    rng: &mut R,
) -> Vec<Rollout> {
    (0..m)
        .map(|_| {
            let response = sample_response(params, prompt, max_len, rng);
            let reward = verify(&response, instance);
            let behavior_log_prob = sequence_log_prob_unchecked(params, prompt.tokens(), &response);
            Rollout {
                response,
                variant,
                behavior_log_prob,
                reward,
                origin: if reward > 0.0 {
                    Origin::Success
                } else {
                    Origin::Failure
                },
            }
        })
        .collect()
}

fn success_rate(rollouts: &[Rollout]) -> f64 {
    let hits = rollouts.iter().filter(|r| r.reward > 0.0).count();
    hits as f64 / rollouts.len() as f64
}

/// `m` rollouts from `old` on the instance's prompt.
pub fn rollout_group<R: Rng + ?Sized>(
    old: &PolicyParams,
    instance: &Instance,
    m: usize,
    max_len: usize,
    rng: &mut R,
) -> RolloutGroup {
    let rollouts = sample_rollouts(
        old,
        instance,
        &instance.prompt,
        PromptVariant::Original,
        m,
        max_len,
        rng,
    );
    RolloutGroup {
        instance: instance.clone(),
        denoised_prompt: None,
        a_bar: success_rate(&rollouts),
        rollouts,
        gate: false,
        denoised_acc: None,
    }
}

/// How the purified prompt is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pruner {
    /// Top interference scores (skipped when the scores are degenerate).
    Interference,
    /// Uniformly random positions.
    Random,
    /// Smallest prompt-likelihood gradient norm.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseSettings {
    pub tau: f64,
    pub gamma: f64,
    pub group_size: usize,
    pub max_len: usize,
}

/// Swaps `min(|failures|, |successes|)` uniformly chosen failures for the
/// first successes. Returns the number replaced.
fn replace_failures<R: Rng + ?Sized>(group: &mut RolloutGroup, successes: Vec<Rollout>, rng: &mut R) -> usize {
    let failures: Vec<usize> = group
        .rollouts
        .iter()
        .enumerate()
        .filter(|(_, r)| r.origin == Origin::Failure)
        .map(|(i, _)| i)
        .collect();
    let count = failures.len().min(successes.len());
    if count == 0 {
        return 0;
    }
    let mut chosen = index::sample(rng, failures.len(), count).into_vec();
    chosen.sort_unstable();
    for (slot, mut incoming) in chosen.into_iter().zip(successes) {
        incoming.origin = Origin::Injected;
        group.rollouts[failures[slot]] = incoming;
    }
    count
}

/// Purify-and-replace step for one group, using interference scores.
pub fn maybe_denoise<R: Rng + ?Sized>(
    theta: &PolicyParams,
    reference: &PolicyParams,
    group: RolloutGroup,
    settings: &DenoiseSettings,
    rng: &mut R,
) -> Result<RolloutGroup, InterferenceError> {
    maybe_denoise_with(Pruner::Interference, theta, reference, group, settings, rng)
}

/// Same as [`maybe_denoise`] with a choice of pruning rule.
pub fn maybe_denoise_with<R: Rng + ?Sized>(
    pruner: Pruner,
    theta: &PolicyParams,
    reference: &PolicyParams,
    mut group: RolloutGroup,
    settings: &DenoiseSettings,
    rng: &mut R,
) -> Result<RolloutGroup, InterferenceError> {
    if group.a_bar >= settings.tau {
        return Ok(group);
    }
    theta.check_finite()?;
    theta.check_tokens(group.prompt().tokens())?;
    let prompt = group.prompt();
    let positions = match pruner {
        Pruner::Interference => {
            reference.check_finite()?;
            let profile = select_interference_set(&scores_unchecked(theta, reference, prompt), settings.gamma);
            if profile.degenerate {
                return Ok(group);
            }
            profile.selected
        }
        Pruner::Random => crate::interference::random_prune_positions(prompt.len(), settings.gamma, rng),
        Pruner::Gradient => gradient_prune_positions(&saliency_unchecked(theta, prompt), settings.gamma),
    };
    if positions.is_empty() || positions.len() >= prompt.len() {
        return Ok(group);
    }
    let denoised = remove_positions(prompt, &positions)?;
    let candidates = sample_rollouts(
        theta,
        &group.instance,
        &denoised,
        PromptVariant::Denoised,
        settings.group_size,
        settings.max_len,
        rng,
    );
    let acc = success_rate(&candidates);
    group.denoised_acc = Some(acc);
    group.denoised_prompt = Some(denoised);
    group.gate = acc > group.a_bar;
    if group.gate {
        let successes: Vec<Rollout> = candidates.into_iter().filter(|r| r.reward > 0.0).collect();
        replace_failures(&mut group, successes, rng);
    }
    Ok(group)
}

/// Draws `m` extra rollouts on the same prompt and swaps successful extras
/// in for failures. `a_bar` keeps the value of the first draw.
pub fn resample_baseline<R: Rng + ?Sized>(
    old: &PolicyParams,
    mut group: RolloutGroup,
    m: usize,
    max_len: usize,
    rng: &mut R,
) -> RolloutGroup {
    let extras = sample_rollouts(
        old,
        &group.instance,
        &group.instance.prompt,
        PromptVariant::Original,
        m,
        max_len,
        rng,
    );
    group.denoised_acc = Some(success_rate(&extras));
    let successes: Vec<Rollout> = extras.into_iter().filter(|r| r.reward > 0.0).collect();
    replace_failures(&mut group, successes, rng);
    group
}

/// Raw weights `ā` for original successes and `1 − ā` for everything else,
/// or all ones when `uniform`.
pub fn compute_weights(group: RolloutGroup, uniform: bool) -> WeightedGroup {
    let a_bar = group.a_bar;
    let w_tilde: Vec<f64> = group
        .rollouts
        .iter()
        .map(|r| {
            if uniform {
                1.0
            } else {
                match r.origin {
                    Origin::Success => a_bar,
                    Origin::Failure | Origin::Injected => 1.0 - a_bar,
                }
            }
        })
        .collect();
    let total: f64 = w_tilde.iter().sum();
    let w = if total > 0.0 {
        w_tilde.iter().map(|x| x / total).collect()
    } else {
        let n = w_tilde.len() as f64;
        vec![1.0 / n; w_tilde.len()]
    };
    WeightedGroup { group, w_tilde, w }
}

fn standardize(rewards: impl Iterator<Item = f64> + Clone, weights: impl Iterator<Item = f64> + Clone, sigma_eps: f64) -> Vec<f64> {
    let mean: f64 = rewards.clone().zip(weights.clone()).map(|(r, w)| w * r).sum();
    let var: f64 = rewards
        .clone()
        .zip(weights)
        .map(|(r, w)| w * (r - mean) * (r - mean))
        .sum();
    let sigma = var.sqrt();
    if !(sigma >= sigma_eps) {
        return rewards.map(|_| 0.0).collect();
    }
    rewards.map(|r| (r - mean) / sigma).collect()
}

/// Weighted standardization of rewards: `(r − Σ w r) / σ_w`, or zeros when
/// `σ_w < sigma_eps`.
pub fn compute_advantages(wg: &WeightedGroup, sigma_eps: f64) -> Vec<f64> {
    standardize(
        wg.group.rollouts.iter().map(|r| r.reward),
        wg.w.iter().copied(),
        sigma_eps,
    )
}

/// Plain group standardization with population std. Uses the same
/// arithmetic as [`compute_advantages`] under uniform weights.
pub fn grpo_advantages(rewards: &[f64], sigma_eps: f64) -> Vec<f64> {
    let w = 1.0 / rewards.len() as f64;
    standardize(rewards.iter().copied(), std::iter::repeat(w).take(rewards.len()), sigma_eps)
}

/// `log π_θ(y | x) − log π_old(y | x_roll(y))`.
pub fn importance_log_ratio(theta: &PolicyParams, prompt: &Prompt, rollout: &Rollout) -> Result<f64, LossError> {
    Ok(sequence_log_prob(theta, prompt, &rollout.response)? - rollout.behavior_log_prob)
}

/// Keeps only groups whose rollouts disagree on reward.
pub fn dapo_filter(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups.into_iter().filter(|g| !g.is_zero_variance()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub clip_eps: f64,
    pub beta: f64,
    pub sigma_eps: f64,
    /// Multiply surrogate terms by normalized weights instead of raw ones.
    pub normalized_surrogate_weights: bool,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Surrogate part of the loss (already negated).
    pub surrogate: f64,
    /// Unscaled KL part summed over groups (zero when `beta = 0`).
    pub kl: f64,
    /// Rollouts whose `|log ρ|` hit [`LOG_RATIO_CLAMP`].
    pub clamp_events: usize,
}

struct GroupTerms<'a> {
    prompt: &'a Prompt,
    rollouts: &'a [Rollout],
    advantages: Vec<f64>,
    multipliers: Vec<f64>,
}

struct GroupResult {
    surrogate: f64,
    kl: f64,
    grad: Vec<f64>,
    clamp_events: usize,
}

/// Sequence-level clipped term `min(ρA, clip(ρ)A)` and the coefficient
/// on `∇ log π_θ(y|x)` in its gradient.
fn clipped_term(log_ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64, bool) {
    let clamped = log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let was_clamped = clamped != log_ratio;
    let ratio = clamped.exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        let coef = if was_clamped { 0.0 } else { advantage * ratio };
        (unclipped, coef, was_clamped)
    } else {
        (clipped, 0.0, was_clamped)
    }
}

/// Exact `KL(π_θ(·|s) ‖ π_ref(·|s))` and its logit gradient.
fn kl_and_logit_grad(cur: &ContextEval, base: &ContextEval, scale: f64) -> (f64, Vec<f64>) {
    let probs = cur.probs();
    let diffs: Vec<f64> = cur
        .log_probs
        .iter()
        .zip(&base.log_probs)
        .map(|(l, q)| l - q)
        .collect();
    let kl: f64 = probs.iter().zip(&diffs).map(|(p, d)| p * d).sum();
    let dz = probs
        .iter()
        .zip(&diffs)
        .map(|(p, d)| scale * p * (d - kl))
        .collect();
    (kl, dz)
}

fn group_objective(
    theta: &PolicyParams,
    reference: &PolicyParams,
    terms: &GroupTerms<'_>,
    settings: &LossSettings,
) -> GroupResult {
    let mut grad = vec![0.0; theta.config().num_params()];
    let mut surrogate = 0.0;
    let mut clamp_events = 0;
    let x = terms.prompt.tokens();
    for ((rollout, &adv), &mult) in terms
        .rollouts
        .iter()
        .zip(&terms.advantages)
        .zip(&terms.multipliers)
    {
        if adv == 0.0 || mult == 0.0 {
            continue;
        }
        let log_prob = sequence_log_prob_unchecked(theta, x, &rollout.response);
        let (term, coef, clamped) = clipped_term(log_prob - rollout.behavior_log_prob, adv, settings.clip_eps);
        clamp_events += clamped as usize;
        surrogate -= mult * term;
        if coef != 0.0 {
            accumulate_sequence_grad(theta, x, &rollout.response, -mult * coef, &mut grad);
        }
    }

    let mut kl_total = 0.0;
    if settings.beta > 0.0 {
        let positions: usize = terms.rollouts.iter().map(|r| r.response.len()).sum();
        if positions > 0 {
            let scale = settings.beta / positions as f64;
            for rollout in terms.rollouts {
                let y = &rollout.response;
                for j in 0..y.len() {
                    let cur = ContextEval::new(theta, x, &y[..j]);
                    let base = ContextEval::new(reference, x, &y[..j]);
                    let (kl, dz) = kl_and_logit_grad(&cur, &base, scale);
                    kl_total += kl;
                    cur.accumulate_logit_grad(theta, &dz, &mut grad);
                }
            }
            kl_total /= positions as f64;
        }
    }
    GroupResult {
        surrogate,
        kl: kl_total,
        grad,
        clamp_events,
    }
}

fn objective(
    theta: &PolicyParams,
    reference: &PolicyParams,
    terms: &[GroupTerms<'_>],
    settings: &LossSettings,
) -> Result<LossOutput, LossError> {
    theta.check_finite()?;
    reference.check_finite()?;
    let results: Vec<GroupResult> = if settings.parallel {
        terms
            .par_iter()
            .map(|t| group_objective(theta, reference, t, settings))
            .collect()
    } else {
        terms
            .iter()
            .map(|t| group_objective(theta, reference, t, settings))
            .collect()
    };
    // reduction in group order keeps the sum bitwise reproducible
    let mut out = LossOutput {
        loss: 0.0,
        grad: vec![0.0; theta.config().num_params()],
        surrogate: 0.0,
        kl: 0.0,
        clamp_events: 0,
    };
    for (group, r) in results.into_iter().enumerate() {
        if !r.surrogate.is_finite() {
            return Err(LossError::NonFinite {
                group,
                what: "surrogate",
            });
        }
        if !r.kl.is_finite() {
            return Err(LossError::NonFinite { group, what: "kl" });
        }
        if !r.grad.iter().all(|g| g.is_finite()) {
            return Err(LossError::NonFinite {
                group,
                what: "gradient",
            });
        }
        out.surrogate += r.surrogate;
        out.kl += r.kl;
        out.clamp_events += r.clamp_events;
        for (acc, g) in out.grad.iter_mut().zip(&r.grad) {
            *acc += g;
        }
    }
    out.loss = out.surrogate + settings.beta * out.kl;
    Ok(out)
}

fn check_group(theta: &PolicyParams, index: usize, group: &RolloutGroup) -> Result<(), LossError> {
    theta.check_tokens(group.prompt().tokens())?;
    for r in &group.rollouts {
        if r.response.is_empty() {
            return Err(LossError::BadGroup {
                group: index,
                reason: "empty response".into(),
            });
        }
        theta.check_tokens(&r.response)?;
        if !r.behavior_log_prob.is_finite() {
            return Err(LossError::NonFinite {
                group: index,
                what: "behavior log-prob",
            });
        }
    }
    Ok(())
}

/// Weighted clipped surrogate plus `β·KL`, and its exact gradient.
pub fn crpo_loss_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    groups: &[WeightedGroup],
    settings: &LossSettings,
) -> Result<LossOutput, LossError> {
    let mut terms = Vec::with_capacity(groups.len());
    for (i, wg) in groups.iter().enumerate() {
        check_group(theta, i, &wg.group)?;
        if wg.w.len() != wg.group.len() || wg.w_tilde.len() != wg.group.len() {
            return Err(LossError::BadGroup {
                group: i,
                reason: "weight count differs from rollout count".into(),
            });
        }
        let multipliers = if settings.normalized_surrogate_weights {
            wg.w.clone()
        } else {
            wg.w_tilde.clone()
        };
        terms.push(GroupTerms {
            prompt: wg.group.prompt(),
            rollouts: &wg.group.rollouts,
            advantages: compute_advantages(wg, settings.sigma_eps),
            multipliers,
        });
    }
    objective(theta, reference, &terms, settings)
}

/// Unweighted clipped surrogate plus `β·KL` on original rollouts only.
pub fn grpo_loss_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    settings: &LossSettings,
) -> Result<LossOutput, LossError> {
    let mut terms = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        check_group(theta, i, g)?;
        if g.rollouts.iter().any(|r| r.variant != PromptVariant::Original) {
            return Err(LossError::BadGroup {
                group: i,
                reason: "grpo takes original-prompt rollouts only".into(),
            });
        }
        let rewards: Vec<f64> = g.rollouts.iter().map(|r| r.reward).collect();
        terms.push(GroupTerms {
            prompt: g.prompt(),
            rollouts: &g.rollouts,
            advantages: grpo_advantages(&rewards, settings.sigma_eps),
            multipliers: vec![1.0; g.len()],
        });
    }
    objective(theta, reference, &terms, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_instance, TaskConfig};
    use crate::policy::PolicyConfig;
    use crate::rng::derive_rng;
    use crate::types::VocabLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rollout(reward: f64, origin: Origin) -> Rollout {
        Rollout {
            response: vec![TokenId(1)],
            variant: PromptVariant::Original,
            behavior_log_prob: -1.0,
            reward,
            origin,
        }
    }

    fn group_with(rewards: &[f64]) -> RolloutGroup {
        let rollouts: Vec<Rollout> = rewards
            .iter()
            .map(|&r| rollout(r, if r > 0.0 { Origin::Success } else { Origin::Failure }))
            .collect();
        RolloutGroup {
            instance: Instance {
                prompt: Prompt::from_tokens(vec![TokenId(0), TokenId(2)]).unwrap(),
                answer: TokenId(5),
                query_key: TokenId(4),
            },
            denoised_prompt: None,
            a_bar: success_rate(&rollouts),
            rollouts,
            gate: false,
            denoised_acc: None,
        }
    }

    #[test]
    fn origin_weights_without_replacement() {
        let g = group_with(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let wg = compute_weights(g, false);
        assert_eq!(&wg.w_tilde[..2], &[0.25, 0.25]);
        assert!(wg.w_tilde[2..].iter().all(|&w| w == 0.75));
        assert_eq!(wg.w_tilde.iter().sum::<f64>(), 5.0);
        assert!((wg.w[0] - 0.05).abs() < 1e-15);
        assert!((wg.w[7] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn origin_weights_at_zero_success_rate() {
        let mut g = group_with(&[0.0; 8]);
        for r in &mut g.rollouts[..3] {
            r.origin = Origin::Injected;
            r.reward = 1.0;
        }
        let wg = compute_weights(g, false);
        assert!(wg.w_tilde.iter().all(|&w| w == 1.0));
        assert!(wg.w.iter().all(|&w| w == 0.125));
    }

    #[test]
    fn uniform_flag_ignores_success_rate() {
        let wg = compute_weights(group_with(&[1.0, 0.0, 0.0]), true);
        assert_eq!(wg.w_tilde, vec![1.0; 3]);
    }

    #[test]
    fn worked_advantage_example() {
        let wg = compute_weights(group_with(&[1.0, 0.0, 0.0, 0.0]), true);
        let a = compute_advantages(&wg, 1e-8);
        let expected = [1.73205, -0.57735, -0.57735, -0.57735];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-5);
        }
        assert_eq!(a, grpo_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-8));
    }

    #[test]
    fn zero_variance_groups_have_zero_advantage() {
        for rewards in [[0.0; 6], [1.0; 6]] {
            let wg = compute_weights(group_with(&rewards), false);
            assert!(compute_advantages(&wg, 1e-8).iter().all(|&a| a == 0.0));
            assert!(grpo_advantages(&rewards, 1e-8).iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn dapo_filter_semantics() {
        let groups = vec![
            group_with(&[0.0, 0.0]),
            group_with(&[1.0, 0.0]),
            group_with(&[1.0, 1.0]),
            group_with(&[0.0, 1.0, 1.0]),
        ];
        let kept = dapo_filter(groups.clone());
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|g| g.a_bar > 0.0 && g.a_bar < 1.0));
        assert_eq!(dapo_filter(kept.clone()), kept);
        assert!(dapo_filter(vec![groups[0].clone(), groups[2].clone()]).is_empty());
    }

    #[test]
    fn clipped_term_branches() {
        // inside the trust region both branches agree
        let (t, c, _) = clipped_term(0.0, 2.0, 0.2);
        assert_eq!((t, c), (2.0, 2.0));
        // positive advantage above the region: clipped, no gradient
        let (t, c, _) = clipped_term(0.5, 1.0, 0.2);
        assert!((t - 1.2).abs() < 1e-15);
        assert_eq!(c, 0.0);
        // negative advantage above the region: unclipped keeps gradient
        let (t, c, _) = clipped_term(0.5, -1.0, 0.2);
        assert!((t + 0.5f64.exp()).abs() < 1e-15);
        assert!((c + 0.5f64.exp()).abs() < 1e-15);
        let (_, c, clamped) = clipped_term(-30.0, 1.0, 0.2);
        assert!(clamped);
        assert_eq!(c, 0.0);
    }

    fn setup() -> (TaskConfig, PolicyParams) {
        let task = TaskConfig {
            pairs: 2,
            distractor_rate: 0.3,
            vocab: VocabLayout::new(3, 3, 2).unwrap(),
        };
        let cfg = PolicyConfig {
            vocab_size: task.vocab.vocab_size(),
            embed_dim: 3,
            window: 3,
            temperature: 1.0,
        };
        let p = PolicyParams::random(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (task, p)
    }

    #[test]
    fn rollout_group_counts_successes() {
        let (task, p) = setup();
        let inst = generate_instance(&task, &mut derive_rng(1, 0, 0)).unwrap();
        let g = rollout_group(&p, &inst, 8, 3, &mut derive_rng(1, 0, 1));
        assert_eq!(g.len(), 8);
        let recount = g.rollouts.iter().filter(|r| r.response[0] == inst.answer).count();
        assert_eq!(g.a_bar, recount as f64 / 8.0);
        for r in &g.rollouts {
            assert_eq!(r.variant, PromptVariant::Original);
            assert_eq!(
                r.behavior_log_prob,
                sequence_log_prob(&p, &inst.prompt, &r.response).unwrap()
            );
        }
        assert!(!g.gate);
    }

    #[test]
    fn importance_ratio_is_one_on_policy() {
        let (task, p) = setup();
        let inst = generate_instance(&task, &mut derive_rng(2, 0, 0)).unwrap();
        let g = rollout_group(&p, &inst, 4, 3, &mut derive_rng(2, 0, 1));
        for r in &g.rollouts {
            assert_eq!(importance_log_ratio(&p, g.prompt(), r).unwrap(), 0.0);
        }
    }

    #[test]
    fn theta_equal_ref_has_zero_kl() {
        let (task, p) = setup();
        let inst = generate_instance(&task, &mut derive_rng(3, 0, 0)).unwrap();
        let g = rollout_group(&p, &inst, 4, 3, &mut derive_rng(3, 0, 1));
        let settings = LossSettings {
            clip_eps: 0.2,
            beta: 0.5,
            sigma_eps: 1e-8,
            normalized_surrogate_weights: false,
            parallel: false,
        };
        let out = crpo_loss_grad(&p, &p, &[compute_weights(g, false)], &settings).unwrap();
        assert_eq!(out.kl, 0.0);
    }

    #[test]
    fn grpo_rejects_denoised_rollouts() {
        let mut g = group_with(&[1.0, 0.0]);
        g.rollouts[1].variant = PromptVariant::Denoised;
        let (_, p) = setup();
        let settings = LossSettings {
            clip_eps: 0.2,
            beta: 0.0,
            sigma_eps: 1e-8,
            normalized_surrogate_weights: false,
            parallel: false,
        };
        assert!(matches!(
            grpo_loss_grad(&p, &p, &[g], &settings),
            Err(LossError::BadGroup { group: 0, .. })
        ));
    }

    #[test]
    fn resample_replaces_min_of_failures_and_extra_successes() {
        let (task, p) = setup();
        let mut saw_five_two = false;
        for seed in 0..300 {
            let inst = generate_instance(&task, &mut derive_rng(seed, 0, 0)).unwrap();
            let mut rng = derive_rng(seed, 0, 1);
            let before = rollout_group(&p, &inst, 8, 2, &mut rng);
            let after = resample_baseline(&p, before.clone(), 8, 2, &mut rng);
            let failures = before.rollouts.iter().filter(|r| r.reward == 0.0).count();
            let extra_hits = (after.denoised_acc.unwrap() * 8.0).round() as usize;
            assert_eq!(after.len(), 8);
            assert_eq!(after.a_bar, before.a_bar);
            assert_eq!(after.injected_count(), failures.min(extra_hits));
            if extra_hits == 0 {
                assert_eq!(after.rollouts, before.rollouts);
            }
            if failures == 5 && extra_hits == 2 {
                saw_five_two = true;
                assert_eq!(after.injected_count(), 2);
            }
        }
        assert!(saw_five_two);
    }

    #[test]
    fn denoised_ratio_compares_prompt_variants() {
        let (task, p) = setup();
        let reference = PolicyParams::random(*p.config(), 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let settings = DenoiseSettings {
            tau: 1.0,
            gamma: 0.3,
            group_size: 8,
            max_len: 3,
        };
        let mut checked = 0;
        let mut nonzero = false;
        for seed in 0..100 {
            let inst = generate_instance(&task, &mut derive_rng(seed, 0, 0)).unwrap();
            let mut rng = derive_rng(seed, 0, 1);
            let g = rollout_group(&p, &inst, 8, 3, &mut rng);
            let g = maybe_denoise(&p, &reference, g, &settings, &mut rng).unwrap();
            let denoised = match &g.denoised_prompt {
                Some(d) => d.clone(),
                None => continue,
            };
            for r in g.rollouts.iter().filter(|r| r.variant == PromptVariant::Denoised) {
                let expected = sequence_log_prob(&p, &inst.prompt, &r.response).unwrap()
                    - sequence_log_prob(&p, &denoised, &r.response).unwrap();
                let got = importance_log_ratio(&p, g.prompt(), r).unwrap();
                assert!((got - expected).abs() < 1e-12);
                nonzero |= got != 0.0;
                checked += 1;
            }
        }
        assert!(checked > 0 && nonzero);
    }

    #[test]
    fn zero_variance_group_contributes_only_kl() {
        let (task, p) = setup();
        let reference = PolicyParams::random(*p.config(), 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let inst = generate_instance(&task, &mut derive_rng(5, 0, 0)).unwrap();
        let mut g = rollout_group(&p, &inst, 4, 3, &mut derive_rng(5, 0, 1));
        for r in &mut g.rollouts {
            r.reward = 0.0;
            r.origin = Origin::Failure;
        }
        g.a_bar = 0.0;
        let settings = LossSettings {
            clip_eps: 0.2,
            beta: 0.3,
            sigma_eps: 1e-8,
            normalized_surrogate_weights: false,
            parallel: false,
        };
        let out = grpo_loss_grad(&p, &reference, &[g], &settings).unwrap();
        assert_eq!(out.surrogate, 0.0);
        assert!(out.kl > 0.0);
        assert_eq!(out.loss, 0.3 * out.kl);
    }
}
