//! Deterministic key-derived random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of keys into one 64-bit seed.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// A ChaCha stream that is a pure function of `(base, keys)`.
pub fn stream(base: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, keys))
}
