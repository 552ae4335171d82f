//! Token ids, vocabulary layout and prompts.

use std::fmt;
use std::ops::Range;

use crate::error::TypeError;

/// An opaque token id in `[0, V)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Beginning-of-sequence. Also stands in for an empty prefix.
pub const BOS: TokenId = TokenId(0);
pub const EOS: TokenId = TokenId(1);
pub const QUERY: TokenId = TokenId(2);
pub const SEP: TokenId = TokenId(3);

const NUM_SPECIALS: u32 = 4;

/// Partition of `[0, V)` into specials, keys, values and distractors.
///
/// Specials always occupy ids 0..4 (BOS, EOS, QUERY, SEP); the other three
/// regions follow in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    keys: Range<u32>,
    values: Range<u32>,
    distractors: Range<u32>,
}

impl VocabLayout {
    pub fn new(num_keys: u32, num_values: u32, num_distractors: u32) -> Result<Self, TypeError> {
        if num_keys == 0 || num_values == 0 || num_distractors == 0 {
            return Err(TypeError::EmptyVocabRegion);
        }
        let keys = NUM_SPECIALS..NUM_SPECIALS + num_keys;
        let values = keys.end..keys.end + num_values;
        let distractors = values.end..values.end + num_distractors;
        let layout = Self {
            keys,
            values,
            distractors,
        };
        if layout.vocab_size() < 8 {
            return Err(TypeError::VocabTooSmall(layout.vocab_size()));
        }
        Ok(layout)
    }

    pub fn vocab_size(&self) -> usize {
        self.distractors.end as usize
    }

    pub fn key_range(&self) -> Range<u32> {
        self.keys.clone()
    }

    pub fn value_range(&self) -> Range<u32> {
        self.values.clone()
    }

    pub fn distractor_range(&self) -> Range<u32> {
        self.distractors.clone()
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t.0 < NUM_SPECIALS
    }

    pub fn is_key(&self, t: TokenId) -> bool {
        self.keys.contains(&t.0)
    }

    pub fn is_value(&self, t: TokenId) -> bool {
        self.values.contains(&t.0)
    }

    pub fn is_distractor(&self, t: TokenId) -> bool {
        self.distractors.contains(&t.0)
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t.index() < self.vocab_size()
    }
}

/// A prompt: token ids plus an optional ground-truth distractor mask.
///
/// The mask is diagnostic only; nothing in the training path reads it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    tokens: Vec<TokenId>,
    distractor_mask: Option<Vec<bool>>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, distractor_mask: Option<Vec<bool>>) -> Result<Self, TypeError> {
        if tokens.is_empty() {
            return Err(TypeError::EmptyPrompt);
        }
        if let Some(mask) = &distractor_mask {
            if mask.len() != tokens.len() {
                return Err(TypeError::MaskLength {
                    tokens: tokens.len(),
                    mask: mask.len(),
                });
            }
        }
        Ok(Self {
            tokens,
            distractor_mask,
        })
    }

    /// Prompt without a distractor mask.
    pub fn from_tokens(tokens: Vec<TokenId>) -> Result<Self, TypeError> {
        Self::new(tokens, None)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn distractor_mask(&self) -> Option<&[bool]> {
        self.distractor_mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn distractor_count(&self) -> usize {
        self.distractor_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_partitions_vocab() {
        let layout = VocabLayout::new(8, 8, 8).unwrap();
        assert_eq!(layout.vocab_size(), 28);
        let mut counts = [0usize; 4];
        for id in 0..layout.vocab_size() as u32 {
            let t = TokenId(id);
            let flags = [
                layout.is_special(t),
                layout.is_key(t),
                layout.is_value(t),
                layout.is_distractor(t),
            ];
            assert_eq!(flags.iter().filter(|&&f| f).count(), 1, "id {id}");
            for (c, f) in counts.iter_mut().zip(flags) {
                *c += f as usize;
            }
        }
        assert_eq!(counts, [4, 8, 8, 8]);
    }

    #[test]
    fn layout_rejects_tiny_vocab() {
        assert!(matches!(
            VocabLayout::new(1, 1, 1),
            Err(TypeError::VocabTooSmall(7))
        ));
        assert!(VocabLayout::new(2, 1, 1).is_ok());
        assert!(VocabLayout::new(0, 4, 4).is_err());
    }

    #[test]
    fn prompt_invariants() {
        assert!(Prompt::from_tokens(vec![]).is_err());
        assert!(Prompt::new(vec![TokenId(1)], Some(vec![true, false])).is_err());
        let p = Prompt::new(vec![TokenId(1), TokenId(2)], Some(vec![false, true])).unwrap();
        assert_eq!(p.distractor_count(), 1);
    }
}
