//! Mean-embedding linear-softmax autoregressive policy.
//!
//! For a prefix `s`, the feature `f(s)` is the mean of the embeddings of the
//! last `min(W, |s|)` tokens (an empty prefix is read as `[BOS]`), and the
//! next-token logits are `z_a = u_a · f(s) / temperature`. Every quantity
//! the optimizer needs (log-probabilities, entropies, KL terms and their
//! gradients) has a closed form, so nothing here depends on an autodiff
//! framework.
//!
//! Parameters live in one flat vector: the embedding matrix `E` (V×d,
//! row-major) followed by the output matrix `U` (V×d, row-major).

use rand::Rng;

use crate::error::PolicyError;
use crate::types::{Prompt, TokenId, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Context window W.
    pub window: usize,
    pub temperature: f64,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size < 2 {
            return Err(PolicyError::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(PolicyError::Config("embed_dim must be >= 1".into()));
        }
        if self.window == 0 {
            return Err(PolicyError::Config("window must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 * self.vocab_size * self.embed_dim
    }
}

/// Policy parameters as one flat vector `[E row-major | U row-major]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    flat: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        Ok(Self {
            config,
            flat: vec![0.0; config.num_params()],
        })
    }

    pub fn from_flat(config: PolicyConfig, flat: Vec<f64>) -> Result<Self, PolicyError> {
        config.validate()?;
        if flat.len() != config.num_params() {
            return Err(PolicyError::ParamLength {
                got: flat.len(),
                expected: config.num_params(),
            });
        }
        let params = Self { config, flat };
        params.check_finite()?;
        Ok(params)
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        config: PolicyConfig,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let mut params = Self::zeros(config)?;
        if scale > 0.0 {
            for x in &mut params.flat {
                *x = rng.gen_range(-scale..=scale);
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    /// Mutable flat view. Callers that may write non-finite values should
    /// follow up with [`PolicyParams::check_finite`].
    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn check_finite(&self) -> Result<(), PolicyError> {
        if self.flat.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(PolicyError::NonFiniteParams)
        }
    }

    /// Offset of `E[t]` in the flat vector.
    #[inline]
    pub fn embedding_offset(&self, t: TokenId) -> usize {
        t.index() * self.config.embed_dim
    }

    /// Offset of `U[t]` in the flat vector.
    #[inline]
    pub fn output_offset(&self, t: TokenId) -> usize {
        (self.config.vocab_size + t.index()) * self.config.embed_dim
    }

    #[inline]
    pub fn embedding(&self, t: TokenId) -> &[f64] {
        let o = self.embedding_offset(t);
        &self.flat[o..o + self.config.embed_dim]
    }

    #[inline]
    pub fn output_row(&self, t: TokenId) -> &[f64] {
        let o = self.output_offset(t);
        &self.flat[o..o + self.config.embed_dim]
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|t| t.index() >= vocab) {
            Some(&token) => Err(PolicyError::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

/// Tokens visible to the next-token distribution after `head ++ tail`.
pub(crate) fn window_tokens(head: &[TokenId], tail: &[TokenId], window: usize) -> Vec<TokenId> {
    let total = head.len() + tail.len();
    if total == 0 {
        return vec![BOS];
    }
    let n = window.min(total);
    let start = total - n;
    let mut out = Vec::with_capacity(n);
    if start < head.len() {
        out.extend_from_slice(&head[start..]);
        out.extend_from_slice(tail);
    } else {
        out.extend_from_slice(&tail[start - head.len()..]);
    }
    out
}

/// One evaluated context: the window, its mean feature and log-probabilities.
#[derive(Debug, Clone)]
pub(crate) struct ContextEval {
    pub window: Vec<TokenId>,
    pub feature: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ContextEval {
    pub fn new(params: &PolicyParams, head: &[TokenId], tail: &[TokenId]) -> Self {
        let cfg = params.config;
        let window = window_tokens(head, tail, cfg.window);
        let mut feature = vec![0.0; cfg.embed_dim];
        for &t in &window {
            for (f, e) in feature.iter_mut().zip(params.embedding(t)) {
                *f += e;
            }
        }
        let inv_n = 1.0 / window.len() as f64;
        for f in &mut feature {
            *f *= inv_n;
        }
        let inv_t = 1.0 / cfg.temperature;
        let mut log_probs: Vec<f64> = (0..cfg.vocab_size)
            .map(|a| dot(params.output_row(TokenId(a as u32)), &feature) * inv_t)
            .collect();
        log_softmax_in_place(&mut log_probs);
        Self {
            window,
            feature,
            log_probs,
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Adds `Σ_a dz[a] · ∂z_a/∂θ` into `grad`, where `dz` is the gradient of
    /// some scalar with respect to this context's logits.
    pub fn accumulate_logit_grad(&self, params: &PolicyParams, dz: &[f64], grad: &mut [f64]) {
        let cfg = params.config;
        let d = cfg.embed_dim;
        let inv_t = 1.0 / cfg.temperature;
        let mut grad_feature = vec![0.0; d];
        for (a, &dza) in dz.iter().enumerate() {
            if dza == 0.0 {
                continue;
            }
            let tok = TokenId(a as u32);
            let off = params.output_offset(tok);
            let scaled = dza * inv_t;
            for k in 0..d {
                grad[off + k] += scaled * self.feature[k];
            }
            for (g, u) in grad_feature.iter_mut().zip(params.output_row(tok)) {
                *g += scaled * u;
            }
        }
        let inv_n = 1.0 / self.window.len() as f64;
        for &t in &self.window {
            let off = params.embedding_offset(t);
            for k in 0..d {
                grad[off + k] += grad_feature[k] * inv_n;
            }
        }
    }

    /// Logit gradient of `log p(target)`.
    pub fn log_prob_logit_grad(&self, target: TokenId, scale: f64) -> Vec<f64> {
        self.log_probs
            .iter()
            .enumerate()
            .map(|(a, lp)| scale * ((a == target.index()) as u8 as f64 - lp.exp()))
            .collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in z {
        *v -= lse;
    }
}

/// Log-softmax next-token distribution after `prefix`.
pub fn token_log_probs(params: &PolicyParams, prefix: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
    params.check_finite()?;
    params.check_tokens(prefix)?;
    Ok(ContextEval::new(params, prefix, &[]).log_probs)
}

pub(crate) fn sequence_log_prob_unchecked(
    params: &PolicyParams,
    prompt: &[TokenId],
    response: &[TokenId],
) -> f64 {
    (0..response.len())
        .map(|j| ContextEval::new(params, prompt, &response[..j]).log_probs[response[j].index()])
        .sum()
}

/// `log π(response | prompt)` as a sum of per-position log-probabilities.
pub fn sequence_log_prob(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &[TokenId],
) -> Result<f64, PolicyError> {
    if response.is_empty() {
        return Err(PolicyError::EmptyResponse);
    }
    params.check_finite()?;
    params.check_tokens(prompt.tokens())?;
    params.check_tokens(response)?;
    Ok(sequence_log_prob_unchecked(params, prompt.tokens(), response))
}

/// Adds `scale · ∇ log π(response | prompt)` into `grad`.
pub(crate) fn accumulate_sequence_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    response: &[TokenId],
    scale: f64,
    grad: &mut [f64],
) {
    for j in 0..response.len() {
        let ctx = ContextEval::new(params, prompt, &response[..j]);
        let dz = ctx.log_prob_logit_grad(response[j], scale);
        ctx.accumulate_logit_grad(params, &dz, grad);
    }
}

/// Exact gradient of [`sequence_log_prob`] with respect to the flat params.
pub fn grad_sequence_log_prob(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    if response.is_empty() {
        return Err(PolicyError::EmptyResponse);
    }
    params.check_finite()?;
    params.check_tokens(prompt.tokens())?;
    params.check_tokens(response)?;
    let mut grad = vec![0.0; params.config.num_params()];
    accumulate_sequence_grad(params, prompt.tokens(), response, 1.0, &mut grad);
    Ok(grad)
}

/// Draws one token from a log-probability vector by inverse CDF.
pub(crate) fn sample_from_log_probs<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return TokenId(a as u32);
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    let last = log_probs
        .iter()
        .rposition(|lp| *lp > f64::NEG_INFINITY)
        .unwrap_or(log_probs.len() - 1);
    TokenId(last as u32)
}

/// Ancestral sampling until EOS (kept in the response) or `max_len` tokens.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &Prompt,
    max_len: usize,
    rng: &mut R,
) -> Vec<TokenId> {
    let max_len = max_len.max(1);
    let mut response = Vec::with_capacity(max_len);
    while response.len() < max_len {
        let ctx = ContextEval::new(params, prompt.tokens(), &response);
        let tok = sample_from_log_probs(&ctx.log_probs, rng);
        response.push(tok);
        if tok == EOS {
            break;
        }
    }
    response
}

pub(crate) fn entropy_of(log_probs: &[f64]) -> f64 {
    let h: f64 = log_probs
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Shannon entropy (nats) of the next-token distribution after `prefix`.
pub fn token_entropy(params: &PolicyParams, prefix: &[TokenId]) -> f64 {
    entropy_of(&ContextEval::new(params, prefix, &[]).log_probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::derive_rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(v: usize, d: usize, w: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size: v,
            embed_dim: d,
            window: w,
            temperature: 1.0,
        }
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    fn random_params(c: PolicyConfig, seed: u64) -> PolicyParams {
        PolicyParams::random(c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_tokens(rng: &mut ChaCha8Rng, v: usize, len: usize) -> Vec<TokenId> {
        (0..len).map(|_| TokenId(rng.gen_range(0..v as u32))).collect()
    }

    // Direct evaluation of the documented formula, kept independent of
    // ContextEval.
    fn reference_log_probs(p: &PolicyParams, prefix: &[TokenId]) -> Vec<f64> {
        let c = p.config();
        let ctx: Vec<TokenId> = if prefix.is_empty() {
            vec![BOS]
        } else {
            prefix[prefix.len().saturating_sub(c.window)..].to_vec()
        };
        let mut f = vec![0.0; c.embed_dim];
        for t in &ctx {
            for k in 0..c.embed_dim {
                f[k] += p.flat()[t.index() * c.embed_dim + k] / ctx.len() as f64;
            }
        }
        let z: Vec<f64> = (0..c.vocab_size)
            .map(|a| {
                (0..c.embed_dim)
                    .map(|k| p.flat()[(c.vocab_size + a) * c.embed_dim + k] * f[k])
                    .sum::<f64>()
                    / c.temperature
            })
            .collect();
        let norm: f64 = z.iter().map(|v| v.exp()).sum();
        z.iter().map(|v| (v.exp() / norm).ln()).collect()
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(cfg(4, 3, 2)).unwrap();
        for prefix in [vec![], toks(&[1]), toks(&[3, 2, 1, 0])] {
            let lp = token_log_probs(&p, &prefix).unwrap();
            for v in lp {
                assert!((v + 4f64.ln()).abs() < 1e-15);
                assert!((v - -1.3862944).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn log_probs_match_direct_formula_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..50 {
            let c = cfg(rng.gen_range(2..9), rng.gen_range(1..5), rng.gen_range(1..5));
            let p = random_params(c, case);
            let len = rng.gen_range(0..7);
            let prefix = random_tokens(&mut rng, c.vocab_size, len);
            let lp = token_log_probs(&p, &prefix).unwrap();
            let sum: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (a, b) in lp.iter().zip(reference_log_probs(&p, &prefix)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_params_rejected() {
        let mut p = PolicyParams::zeros(cfg(4, 2, 2)).unwrap();
        p.flat_mut()[3] = f64::NAN;
        assert_eq!(token_log_probs(&p, &[]), Err(PolicyError::NonFiniteParams));
        assert!(PolicyParams::from_flat(cfg(4, 2, 2), vec![f64::INFINITY; 16]).is_err());
        assert!(PolicyParams::from_flat(cfg(4, 2, 2), vec![0.0; 15]).is_err());
    }

    #[test]
    fn out_of_range_token_rejected() {
        let p = PolicyParams::zeros(cfg(4, 2, 2)).unwrap();
        assert!(matches!(
            token_log_probs(&p, &toks(&[4])),
            Err(PolicyError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn flat_layout_is_e_then_u_row_major() {
        let c = cfg(3, 2, 1);
        let flat: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let p = PolicyParams::from_flat(c, flat).unwrap();
        assert_eq!(p.embedding(TokenId(1)), &[2.0, 3.0]);
        assert_eq!(p.output_row(TokenId(0)), &[6.0, 7.0]);
        assert_eq!(p.output_row(TokenId(2)), &[10.0, 11.0]);
    }

    #[test]
    fn sequence_log_prob_cases() {
        let p = PolicyParams::zeros(cfg(4, 2, 2)).unwrap();
        let prompt = Prompt::from_tokens(toks(&[0, 2])).unwrap();
        let lp = sequence_log_prob(&p, &prompt, &toks(&[1, 2, 3])).unwrap();
        assert!((lp + 3.0 * 4f64.ln()).abs() < 1e-14);
        assert_eq!(sequence_log_prob(&p, &prompt, &[]), Err(PolicyError::EmptyResponse));

        let p = random_params(cfg(6, 3, 3), 9);
        let single = sequence_log_prob(&p, &prompt, &toks(&[5])).unwrap();
        assert_eq!(single, token_log_probs(&p, prompt.tokens()).unwrap()[5]);

        let response = toks(&[4, 1, 3, 3]);
        let mut expected = 0.0;
        for j in 0..response.len() {
            let mut prefix = prompt.tokens().to_vec();
            prefix.extend_from_slice(&response[..j]);
            expected += reference_log_probs(&p, &prefix)[response[j].index()];
        }
        let got = sequence_log_prob(&p, &prompt, &response).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn sampling_near_deterministic() {
        // E[BOS] and every embedding share a direction that U[2] amplifies.
        let c = cfg(5, 1, 2);
        let mut flat = vec![1.0; 10];
        for a in 0..5 {
            flat[5 + a] = if a == 2 { 100.0 } else { 0.0 };
        }
        let p = PolicyParams::from_flat(c, flat).unwrap();
        let prompt = Prompt::from_tokens(toks(&[0])).unwrap();
        let r = sample_response(&p, &prompt, 5, &mut derive_rng(1, 0, 0));
        assert_eq!(r, toks(&[2, 2, 2, 2, 2]));

        let mut flat = vec![1.0; 10];
        for a in 0..5 {
            flat[5 + a] = if a == EOS.index() { 100.0 } else { 0.0 };
        }
        let p = PolicyParams::from_flat(c, flat).unwrap();
        assert_eq!(sample_response(&p, &prompt, 5, &mut derive_rng(1, 0, 0)), vec![EOS]);
        assert!(token_entropy(&p, &[]) <= 1e-3);
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let p = random_params(cfg(8, 3, 3), 4);
        let prompt = Prompt::from_tokens(toks(&[0, 5, 6])).unwrap();
        let a = sample_response(&p, &prompt, 6, &mut derive_rng(3, 1, 2));
        let b = sample_response(&p, &prompt, 6, &mut derive_rng(3, 1, 2));
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 6);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let v = 4usize;
        let p = PolicyParams::zeros(cfg(v, 2, 2)).unwrap();
        let prompt = Prompt::from_tokens(toks(&[0])).unwrap();
        let n = 100_000usize;
        let mut counts = vec![0usize; v];
        let mut rng = derive_rng(5, 0, 0);
        for _ in 0..n {
            let r = sample_response(&p, &prompt, 1, &mut rng);
            counts[r[0].index()] += 1;
        }
        let mean = n as f64 / v as f64;
        let sd = (n as f64 * (1.0 / v as f64) * (1.0 - 1.0 / v as f64)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn entropy_cases() {
        let p = PolicyParams::zeros(cfg(4, 2, 2)).unwrap();
        assert!((token_entropy(&p, &[]) - 4f64.ln()).abs() < 1e-15);
        let p = random_params(cfg(7, 3, 2), 2);
        let prefix = toks(&[3, 1]);
        let direct: f64 = reference_log_probs(&p, &prefix)
            .iter()
            .map(|lp| -lp.exp() * lp)
            .sum();
        assert!((token_entropy(&p, &prefix) - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_params_single_token_gradient() {
        // With U = 0 the gradient w.r.t. U[a] is f(s)·(1[a=y] − 1/V) and the
        // embedding gradient vanishes.
        let v = 5;
        let d = 3;
        let mut p = PolicyParams::zeros(cfg(v, d, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for x in &mut p.flat_mut()[..v * d] {
            *x = rng.gen_range(-1.0..1.0);
        }
        let prompt = Prompt::from_tokens(toks(&[1, 4, 2])).unwrap();
        let y = TokenId(3);
        let g = grad_sequence_log_prob(&p, &prompt, &[y]).unwrap();
        let f: Vec<f64> = (0..d)
            .map(|k| (p.embedding(TokenId(4))[k] + p.embedding(TokenId(2))[k]) / 2.0)
            .collect();
        for a in 0..v {
            let ind = (a == y.index()) as u8 as f64;
            for k in 0..d {
                let got = g[(v + a) * d + k];
                assert!((got - f[k] * (ind - 1.0 / v as f64)).abs() < 1e-14);
            }
        }
        assert!(g[..v * d].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..30 {
            let c = PolicyConfig {
                vocab_size: rng.gen_range(2..9),
                embed_dim: rng.gen_range(1..5),
                window: rng.gen_range(1..5),
                temperature: rng.gen_range(0.5..2.0),
            };
            let p = random_params(c, 100 + case);
            let plen = rng.gen_range(1..6);
            let rlen = rng.gen_range(1..4);
            let prompt = Prompt::from_tokens(random_tokens(&mut rng, c.vocab_size, plen)).unwrap();
            let response = random_tokens(&mut rng, c.vocab_size, rlen);
            let g = grad_sequence_log_prob(&p, &prompt, &response).unwrap();
            let h = 1e-5;
            for i in 0..c.num_params() {
                let mut plus = p.clone();
                plus.flat_mut()[i] += h;
                let mut minus = p.clone();
                minus.flat_mut()[i] -= h;
                let fd = (sequence_log_prob(&plus, &prompt, &response).unwrap()
                    - sequence_log_prob(&minus, &prompt, &response).unwrap())
                    / (2.0 * h);
                let rel = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-6);
                assert!(rel <= 1e-4, "case {case} param {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn normalization_holds(seed in 0u64..10_000, v in 2usize..12, d in 1usize..6,
                               w in 1usize..6, len in 0usize..10, scale in 0.0f64..5.0) {
            let c = cfg(v, d, w);
            let p = PolicyParams::random(c, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let prefix = random_tokens(&mut rng, v, len);
            let sum: f64 = token_log_probs(&p, &prefix).unwrap().iter().map(|x| x.exp()).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            let h = token_entropy(&p, &prefix);
            prop_assert!(h >= 0.0 && h <= (v as f64).ln() + 1e-12);
        }

        #[test]
        fn temperature_scaling_identity(seed in 0u64..10_000, c_scale in 0.1f64..4.0, len in 0usize..6) {
            let base = cfg(6, 3, 3);
            let p0 = random_params(base, seed);
            let mut scaled = p0.clone();
            let off = 6 * 3;
            for x in &mut scaled.flat_mut()[off..] {
                *x *= c_scale;
            }
            let hot = PolicyParams::from_flat(
                PolicyConfig { temperature: 1.0 / c_scale, ..base },
                p0.flat().to_vec(),
            ).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prefix = random_tokens(&mut rng, 6, len);
            let a = token_log_probs(&scaled, &prefix).unwrap();
            let b = token_log_probs(&hot, &prefix).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.exp() - y.exp()).abs() <= 1e-9);
            }
        }
    }
}
