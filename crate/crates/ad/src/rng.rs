//! Deterministic randomness helpers.
//!
//! Every stochastic decision in a run (parameter init, batch shuffles,
//! sampling) draws from its own ChaCha stream seeded by mixing a master seed
//! with a purpose tag, so adding or removing one consumer never perturbs the
//! draws of another.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mixes a master seed with a purpose tag (FNV-1a over the tag bytes,
/// followed by a SplitMix64 finalizer). Stable across platforms.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for a tagged purpose under a master seed.
pub fn stream(master: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag))
}

/// Deterministic permutation of `0..n` for a given (seed, tag, epoch).
pub fn epoch_order(master: u64, tag: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = stream(master, &format!("{tag}.epoch{epoch}"));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
