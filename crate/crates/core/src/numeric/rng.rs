//! Seeded randomness shared by splitting, initialization and dropout.
//!
//! All draws come from ChaCha8 (`rand_chacha`, seeded with `seed_from_u64`),
//! whose output stream is stable across crate releases. Independent consumers
//! use separate ChaCha streams of the same seed. Bounded integers and unit
//! floats are derived here rather than through `rand` distributions so the
//! mapping from stream to value is fixed by this file alone.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Recorded in every artifact whose contents depend on random draws.
pub const PRNG_NAME: &str = "chacha8/seed_from_u64";

/// Stream ids for the independent consumers of one seed.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const EPOCH_SHUFFLE: u64 = 4;
    pub const SYNTH: u64 = 5;
}

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in `[0, 1)` from the top 53 bits of one `u64` draw.
pub fn unit(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform integer in `[0, n)`, by rejection so there is no modulo bias.
pub fn below(rng: &mut Rng, n: u64) -> u64 {
    assert!(n > 0);
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % n;
        }
    }
}

/// Standard normal via Box-Muller (consumes two draws).
pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fisher-Yates, walking from the last index down.
pub fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
