//! Deterministic per-stream RNG derivation.
//!
//! Each stream is keyed by `(seed, problem id, iteration, index, label)` so
//! that draws do not depend on the order in which concurrent work completes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Stable 64-bit key for a stream.
pub fn stream_seed(seed: u64, problem_id: &str, iteration: usize, index: usize, label: &str) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    // Length prefixes keep ("ab", "c") and ("a", "bc") apart.
    h = fnv1a(h, &(problem_id.len() as u64).to_le_bytes());
    h = fnv1a(h, problem_id.as_bytes());
    h = fnv1a(h, &(iteration as u64).to_le_bytes());
    h = fnv1a(h, &(index as u64).to_le_bytes());
    h = fnv1a(h, &(label.len() as u64).to_le_bytes());
    h = fnv1a(h, label.as_bytes());
    splitmix64(h)
}

pub fn stream_rng(seed: u64, problem_id: &str, iteration: usize, index: usize, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, problem_id, iteration, index, label))
}
