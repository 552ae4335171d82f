//! Interference-token scoring, prompt purification and pruning baselines.
//!
//! A position's interference score is the absolute gap between the current
//! and the reference policy's teacher-forced log-probability of the prompt
//! token at that position. Purification deletes the `k = ceil(γ·|x|)`
//! highest-scoring positions.

use rand::seq::index;
use rand::Rng;

use crate::error::InterferenceError;
use crate::policy::{ContextEval, PolicyParams};
use crate::types::Prompt;

/// Scores below this are treated as "no signal" when every score is below it.
pub const DEGENERATE_SCORE: f64 = 1e-12;

/// Scores plus the selected interference set.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceProfile {
    pub scores: Vec<f64>,
    pub k: usize,
    /// Selected positions, ascending.
    pub selected: Vec<usize>,
    /// Every score is below [`DEGENERATE_SCORE`]; the selection only reflects
    /// the tie rule.
    pub degenerate: bool,
}

/// `k = ceil(γ·n)`. Products that land within 1e-9 of an integer are
/// snapped to it, so `0.07 · 100` gives 7 rather than 8.
pub fn deletion_count(gamma: f64, len: usize) -> usize {
    let x = gamma * len as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 {
        nearest
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(len)
}

/// Teacher-forced per-position scores `|log π_θ(t_j|t_<j) − log π_ref(t_j|t_<j)|`.
pub fn interference_scores(
    theta: &PolicyParams,
    reference: &PolicyParams,
    prompt: &Prompt,
) -> Result<Vec<f64>, InterferenceError> {
    theta.check_finite()?;
    reference.check_finite()?;
    theta.check_tokens(prompt.tokens())?;
    reference.check_tokens(prompt.tokens())?;
    Ok(scores_unchecked(theta, reference, prompt))
}

pub(crate) fn scores_unchecked(theta: &PolicyParams, reference: &PolicyParams, prompt: &Prompt) -> Vec<f64> {
    let toks = prompt.tokens();
    (0..toks.len())
        .map(|j| {
            let t = toks[j].index();
            let cur = ContextEval::new(theta, &toks[..j], &[]).log_probs[t];
            let base = ContextEval::new(reference, &toks[..j], &[]).log_probs[t];
            (cur - base).abs()
        })
        .collect()
}

/// Top-`k` positions by score, ties broken toward the smaller index.
pub fn select_interference_set(scores: &[f64], gamma: f64) -> InterferenceProfile {
    let k = deletion_count(gamma, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    InterferenceProfile {
        scores: scores.to_vec(),
        k,
        selected,
        degenerate: !(max >= DEGENERATE_SCORE),
    }
}

/// Removes `positions` (any order, no duplicates) from the prompt and remaps
/// the distractor mask.
pub fn remove_positions(prompt: &Prompt, positions: &[usize]) -> Result<Prompt, InterferenceError> {
    let n = prompt.len();
    let mut drop = vec![false; n];
    for &p in positions {
        if p >= n {
            return Err(InterferenceError::BadPosition { position: p, len: n });
        }
        drop[p] = true;
    }
    let kept = drop.iter().filter(|d| !**d).count();
    if kept == 0 {
        return Err(InterferenceError::RemovesEverything(n));
    }
    let tokens = prompt
        .tokens()
        .iter()
        .zip(&drop)
        .filter(|(_, d)| !**d)
        .map(|(t, _)| *t)
        .collect();
    let mask = prompt.distractor_mask().map(|m| {
        m.iter()
            .zip(&drop)
            .filter(|(_, d)| !**d)
            .map(|(b, _)| *b)
            .collect()
    });
    Ok(Prompt::new(tokens, mask).expect("kept tokens and mask stay aligned"))
}

/// The denoised prompt `x \ I`.
pub fn purify(prompt: &Prompt, profile: &InterferenceProfile) -> Result<Prompt, InterferenceError> {
    remove_positions(prompt, &profile.selected)
}

/// Positions a uniform random pruner would delete.
pub fn random_prune_positions<R: Rng + ?Sized>(len: usize, gamma: f64, rng: &mut R) -> Vec<usize> {
    let k = deletion_count(gamma, len);
    let mut picked = index::sample(rng, len, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Deletes `ceil(γ·|x|)` uniformly chosen distinct positions.
pub fn random_prune<R: Rng + ?Sized>(
    prompt: &Prompt,
    gamma: f64,
    rng: &mut R,
) -> Result<Prompt, InterferenceError> {
    let positions = random_prune_positions(prompt.len(), gamma, rng);
    remove_positions(prompt, &positions)
}

/// Per-position saliency: the norm of the gradient of the prompt's
/// teacher-forced log-likelihood with respect to the embedding occupying
/// that position (each occurrence of a token counted separately).
pub fn position_saliency(theta: &PolicyParams, prompt: &Prompt) -> Result<Vec<f64>, InterferenceError> {
    theta.check_finite()?;
    theta.check_tokens(prompt.tokens())?;
    Ok(saliency_unchecked(theta, prompt))
}

pub(crate) fn saliency_unchecked(theta: &PolicyParams, prompt: &Prompt) -> Vec<f64> {
    let cfg = theta.config();
    let d = cfg.embed_dim;
    let inv_t = 1.0 / cfg.temperature;
    let toks = prompt.tokens();
    let n = toks.len();
    let mut grads = vec![0.0; n * d];
    // position 0 is predicted from the BOS stand-in, not from a prompt position
    for i in 1..n {
        let ctx = ContextEval::new(theta, &toks[..i], &[]);
        let width = ctx.window.len();
        let mut grad_feature = theta.output_row(toks[i]).to_vec();
        for (a, lp) in ctx.log_probs.iter().enumerate() {
            let p = lp.exp();
            for (g, u) in grad_feature.iter_mut().zip(theta.output_row(crate::types::TokenId(a as u32))) {
                *g -= p * u;
            }
        }
        let scale = inv_t / width as f64;
        for j in i - width..i {
            for k in 0..d {
                grads[j * d + k] += scale * grad_feature[k];
            }
        }
    }
    grads
        .chunks_exact(d)
        .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Positions with the smallest saliency, ties toward the smaller index.
pub fn gradient_prune_positions(saliency: &[f64], gamma: f64) -> Vec<usize> {
    let k = deletion_count(gamma, saliency.len());
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency[a].total_cmp(&saliency[b]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Deletes the `ceil(γ·|x|)` least salient positions.
pub fn gradient_prune(theta: &PolicyParams, prompt: &Prompt, gamma: f64) -> Result<Prompt, InterferenceError> {
    let saliency = position_saliency(theta, prompt)?;
    remove_positions(prompt, &gradient_prune_positions(&saliency, gamma))
}
