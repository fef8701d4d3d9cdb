//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness (data generation, weight init, per-client
//! shuffling, per-client noise) gets its own ChaCha stream keyed by a hash
//! of the experiment seed and a short coordinate path, so results do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

/// Stream domains.
pub mod domain {
    pub const DATA: u64 = 0x11;
    pub const INIT: u64 = 0x22;
    pub const SHUFFLE: u64 = 0x33;
    pub const NOISE: u64 = 0x44;
    pub const WARMUP_SHUFFLE: u64 = 0x55;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `seed` together with `path` into a single 64-bit stream id.
pub fn stream_id(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &x| splitmix64(acc ^ splitmix64(x)))
}

pub fn derive(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(stream_id(seed, path))
}
