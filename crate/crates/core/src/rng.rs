//! Seed derivation and noise sources.
//!
//! All randomness in the crate flows through explicit seeds. Derived seeds
//! are produced by folding context words (epoch, document index, call
//! counter, ...) into a base seed with a splitmix-style mixer, so the same
//! configuration replays bit-identically regardless of evaluation order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step; a good avalanche mixer for seed derivation.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`, one mixing round per part.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Deterministic generator for a derived seed.
pub fn rng_from(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}

/// Standard Gumbel(0, 1) sample; the uniform is kept away from 0 so the
/// double log stays finite.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Counter-based per-call seed stream.
///
/// Each sampling site pulls the next derived seed; the stream is rebuilt
/// from the same base seed on every forward pass, so noise depends only on
/// (base seed, call index) and never on evaluation order elsewhere.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    base: u64,
    counter: u64,
}

impl NoiseStream {
    pub fn new(base: u64) -> Self {
        NoiseStream { base, counter: 0 }
    }

    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = rng_from(self.base, &[self.counter]);
        self.counter += 1;
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mix_is_deterministic_and_order_sensitive() {
        assert_eq!(mix(7, &[1, 2]), mix(7, &[1, 2]));
        assert_ne!(mix(7, &[1, 2]), mix(7, &[2, 1]));
        assert_ne!(mix(7, &[1]), mix(8, &[1]));
    }

    #[test]
    fn noise_stream_replays() {
        let mut a = NoiseStream::new(42);
        let mut b = NoiseStream::new(42);
        for _ in 0..5 {
            let x: f64 = a.next_rng().gen();
            let y: f64 = b.next_rng().gen();
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gumbel_is_finite() {
        let mut rng = rng_from(0, &[]);
        for _ in 0..10_000 {
            assert!(gumbel(&mut rng).is_finite());
        }
    }
}
