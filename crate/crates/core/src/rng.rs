//! Seeded randomness shared by every reproducible operation.
//!
//! All seeded operations draw from ChaCha8 seeded through `seed_from_u64`
//! (PCG32-expanded seed, as defined by `rand_core`). Uniform indices use the
//! multiply-shift reduction `(x * n) >> 64` on a raw `u64` draw so the
//! sequence does not depend on `rand`'s range-sampling internals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform index in `0..n`. `n` must be non-zero.
pub fn index(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Uniform float in `[0, 1)` with 53 bits of precision.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher-Yates shuffle, walking from the last element down.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}
