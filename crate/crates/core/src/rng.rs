//! Seeded randomness. Every stochastic step in the crate draws from a
//! ChaCha8 stream whose seed is derived from the user seed plus a purpose tag,
//! so runs are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a seed with a sequence of tags (splitmix64 finalizer per step).
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut x = seed;
    for &t in tags {
        x = splitmix(x ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
