//! Seeded random substreams.
//!
//! All randomness in a run flows from one master seed. Each component
//! (init, shuffle, augment, pair sampling, per-sample generation) draws
//! from its own named substream so that changing one component's
//! consumption pattern does not perturb the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a, used only to fold a substream name into the seed.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for the named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// RNG for per-index work inside a named substream.
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15))
}
