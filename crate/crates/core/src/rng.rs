//! Seeded random streams.
//!
//! Every stochastic component draws from a `ChaCha8Rng` whose seed is derived
//! from a global seed plus stable labels (question id, view index, step), so
//! per-sample randomness does not depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a textual label into a child seed.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let h = fnv1a(FNV_OFFSET ^ splitmix64(parent), label.as_bytes());
    splitmix64(h)
}

/// Child seed for a numbered sub-stream (step, view index, ...).
pub fn derive_seed_n(parent: u64, n: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ n.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The stream used for one augmentation view of one question.
pub fn view_rng(stream_seed: u64, question_id: &str, view: u64) -> Rng {
    rng_from_seed(derive_seed_n(derive_seed(stream_seed, question_id), view))
}
