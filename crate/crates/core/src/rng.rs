//! Seed derivation. Every stochastic stage draws from its own ChaCha stream
//! keyed by `(base seed, purpose, index)` so per-sample results are
//! independent of iteration order and worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h = mix(base);
    for b in stream.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index)
}

pub fn stream(base: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, name, index))
}
