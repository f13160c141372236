//! Portable random streams.
//!
//! All randomness in the engine flows through [`ChaCha8Rng`] seeded with
//! `seed_from_u64` and selected by stream number, and all permutations use the
//! Fisher-Yates shuffle below with rejection-sampled bounded integers. Both are
//! fully specified, so another implementation can reproduce the exact folds and
//! batch orders.
//!
//! Stream layout for a `(seed, fold)` pair:
//! - split shuffle: `ChaCha8Rng::seed_from_u64(seed)`, stream `fold`
//! - batch order: `ChaCha8Rng::seed_from_u64(fold_seed(seed, fold))`, stream 0

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finaliser applied to `seed + golden * (fold + 1)`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform integer in `0..bound`. Draws whole `u64`s and rejects the biased
/// low zone of size `2^64 mod bound`.
pub fn bounded(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "bounded() needs a positive bound");
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let x = rng.next_u64();
        if x >= threshold {
            return x % bound;
        }
    }
}

/// In-place Fisher-Yates, walking from the last element down.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = bounded(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        shuffle(&mut stream(7, 3), &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(stream(1, 0), |r, _: u64| Some(r.next_u64()))
            .collect();
        let b: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(stream(1, 0), |r, _: u64| Some(r.next_u64()))
            .collect();
        let c: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(stream(1, 1), |r, _: u64| Some(r.next_u64()))
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bounded_stays_in_range() {
        let mut rng = stream(0, 0);
        for bound in [1u64, 2, 3, 7, 1000, u64::MAX] {
            for _ in 0..50 {
                assert!(bounded(&mut rng, bound) < bound);
            }
        }
    }

    #[test]
    fn fold_seeds_differ() {
        assert_ne!(fold_seed(0, 0), fold_seed(0, 1));
        assert_ne!(fold_seed(0, 0), fold_seed(1, 0));
    }
}
