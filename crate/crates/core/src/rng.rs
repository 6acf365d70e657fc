//! Named random sub-streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Sub-stream names used across the pipeline.
pub const DATASET: &str = "dataset";
pub const EMBEDDING: &str = "embedding";
pub const MATCHER: &str = "matcher";
pub const EPISODES: &str = "episodes";
pub const NEIGHBORS: &str = "neighbors";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed of the named sub-stream `name` under `master`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a(name.as_bytes()))
}

/// Seed for position `index` inside a stream (e.g. episode number).
pub fn indexed_seed(stream_seed: u64, index: u64) -> u64 {
    splitmix64(stream_seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
