//! Seed plumbing. Every random choice in a run flows from one master seed
//! through named sub-streams, so that data generation, weight init,
//! augmentation and shuffling can be reproduced independently.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the stream name, folded into the master seed.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Combine a seed with an index (per-sample seeds, per-epoch shuffles).
pub fn mix2(seed: u64, k: u64) -> u64 {
    mix(seed ^ mix(k))
}

/// Seed of a named sub-stream (useful when a stream is re-keyed per epoch).
pub fn stream_seed(master: u64, name: &str) -> u64 {
    mix(master ^ fnv1a(name.as_bytes()))
}

/// Deterministic named sub-stream of the master seed.
pub fn stream(master: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream_seed(master, name))
}
