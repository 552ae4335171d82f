//! Deterministic random-stream derivation.
//!
//! Every stochastic draw in a run comes from a ChaCha8 stream keyed by
//! `(seed, step, prompt_index)`. The key is the little-endian concatenation
//! of the three integers plus a domain tag, so distinct triples give
//! independent streams and the same triple always gives the same stream no
//! matter which thread asks for it. Different uses of one triple (instance
//! generation, rollouts, purification) are separated by ChaCha's stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

const DOMAIN_TAG: u64 = 0x4c45_4e53_4c41_4201;

/// Independent uses of one `(seed, step, prompt_index)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    General = 0,
    Instance = 1,
    Rollout = 2,
    Denoise = 3,
    Init = 4,
    Eval = 5,
    Control = 6,
}

/// Step index reserved for streams that are not tied to a training step.
pub const NON_STEP: u64 = u64::MAX;

pub fn derive_rng(seed: u64, step: u64, prompt_index: u64) -> RngStream {
    derive_rng_for(seed, step, prompt_index, Purpose::General)
}

pub fn derive_rng_for(seed: u64, step: u64, prompt_index: u64, purpose: Purpose) -> RngStream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&prompt_index.to_le_bytes());
    key[24..32].copy_from_slice(&DOMAIN_TAG.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose as u64);
    rng
}
