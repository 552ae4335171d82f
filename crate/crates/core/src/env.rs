//! Key-value retrieval task with injected distractor tokens.
//!
//! A prompt lists `P` key/value pairs, then `QUERY <key> SEP`; the correct
//! response starts with the value paired to the queried key. Keys map to
//! values through a fixed codebook, `value = values.start + (key -
//! keys.start) mod |values|`.
//!
//! After every non-special token, an independent Bernoulli(ρ_d) draw inserts
//! one distractor id drawn uniformly from the distractor range. Nothing is
//! inserted after BOS or SEP.

use rand::seq::index;
use rand::Rng;

use crate::error::EnvError;
use crate::types::{Prompt, TokenId, VocabLayout, BOS, QUERY, SEP};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Number of key/value pairs (P).
    pub pairs: usize,
    /// Distractor injection rate ρ_d in [0, 1]; 1 puts a distractor after
    /// every non-special token.
    pub distractor_rate: f64,
    pub vocab: VocabLayout,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.pairs == 0 {
            return Err(EnvError::NoPairs);
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(EnvError::DistractorRate(self.distractor_rate));
        }
        let available = self.vocab.key_range().len();
        if available < self.pairs {
            return Err(EnvError::NotEnoughKeys {
                available,
                pairs: self.pairs,
            });
        }
        Ok(())
    }

    /// The value paired with `key` by the codebook.
    pub fn value_for(&self, key: TokenId) -> TokenId {
        let keys = self.vocab.key_range();
        let values = self.vocab.value_range();
        let offset = (key.0 - keys.start) % values.len() as u32;
        TokenId(values.start + offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub prompt: Prompt,
    pub answer: TokenId,
    pub query_key: TokenId,
}

impl Instance {
    /// Serialize as three lines: token ids, 0/1 mask, answer id.
    pub fn to_golden_text(&self) -> String {
        let ids: Vec<String> = self.prompt.tokens().iter().map(|t| t.to_string()).collect();
        let mask: Vec<&str> = match self.prompt.distractor_mask() {
            Some(m) => m.iter().map(|&b| if b { "1" } else { "0" }).collect(),
            None => vec!["0"; self.prompt.len()],
        };
        format!("{}\n{}\n{}\n", ids.join(" "), mask.join(" "), self.answer)
    }

    /// Parse the three-line text form. The query key is recovered as the
    /// token following QUERY.
    pub fn from_golden_text(text: &str) -> Result<Self, EnvError> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| EnvError::Parse(format!("missing {what} line")))
        };
        let ids = next("token")?;
        let mask = next("mask")?;
        let answer = next("answer")?;
        let tokens = ids
            .split_whitespace()
            .map(|s| s.parse::<u32>().map(TokenId))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EnvError::Parse(e.to_string()))?;
        let mask = mask
            .split_whitespace()
            .map(|s| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(EnvError::Parse(format!("bad mask entry {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let answer = TokenId(
            answer
                .trim()
                .parse()
                .map_err(|e: std::num::ParseIntError| EnvError::Parse(e.to_string()))?,
        );
        let query_key = tokens
            .iter()
            .position(|&t| t == QUERY)
            .and_then(|i| tokens.get(i + 1).copied())
            .ok_or_else(|| EnvError::Parse("no token after QUERY".into()))?;
        Ok(Self {
            prompt: Prompt::new(tokens, Some(mask))?,
            answer,
            query_key,
        })
    }
}

/// Draws one instance. Pair and query draws come first from `rng`, then the
/// distractor draws, so the distractor-free skeleton does not depend on ρ_d.
pub fn generate_instance<R: Rng + ?Sized>(task: &TaskConfig, rng: &mut R) -> Result<Instance, EnvError> {
    task.validate()?;
    let keys_range = task.vocab.key_range();
    let picked = index::sample(rng, keys_range.len(), task.pairs);
    let keys: Vec<TokenId> = picked
        .iter()
        .map(|i| TokenId(keys_range.start + i as u32))
        .collect();
    let query_key = keys[rng.gen_range(0..task.pairs)];
    let answer = task.value_for(query_key);

    let mut skeleton = Vec::with_capacity(2 * task.pairs + 4);
    skeleton.push(BOS);
    for &k in &keys {
        skeleton.push(k);
        skeleton.push(task.value_for(k));
    }
    skeleton.push(QUERY);
    skeleton.push(query_key);
    skeleton.push(SEP);

    let distractors = task.vocab.distractor_range();
    let mut tokens = Vec::with_capacity(skeleton.len() * 2);
    let mut mask = Vec::with_capacity(skeleton.len() * 2);
    for &t in &skeleton {
        tokens.push(t);
        mask.push(false);
        if task.vocab.is_special(t) {
            continue;
        }
        if rng.gen::<f64>() < task.distractor_rate {
            tokens.push(TokenId(rng.gen_range(distractors.clone())));
            mask.push(true);
        }
    }
    Ok(Instance {
        prompt: Prompt::new(tokens, Some(mask))?,
        answer,
        query_key,
    })
}

/// Binary reward: 1 when the first response token is the answer.
pub fn verify(response: &[TokenId], instance: &Instance) -> f64 {
    match response.first() {
        Some(&t) if t == instance.answer => 1.0,
        _ => 0.0,
    }
}
