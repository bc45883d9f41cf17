//! Seeded randomness shared by every stochastic step in the crate.
//!
//! All generators are ChaCha8 streams seeded through `seed_from_u64`, which
//! `rand_chacha` keeps value-stable across releases. Shuffling does not go
//! through `rand::seq` (whose algorithm may change between versions); it uses
//! the explicit Fisher–Yates below so that a seed means the same permutation
//! in any implementation that reproduces ChaCha8 and this procedure.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Identifier of the shuffle procedure, recorded in reports.
pub const SHUFFLE_ALGORITHM: &str = "lens-fisher-yates-chacha8-v1";

/// A fresh generator for `seed`.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform integer in `[0, bound)` by rejection on a 64-bit draw.
///
/// Panics if `bound == 0`.
pub fn uniform_below<R: RngCore>(rng: &mut R, bound: u64) -> u64 {
    assert!(bound > 0, "uniform_below called with empty range");
    // Largest multiple of `bound` that fits; draws at or above it are rejected.
    let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % bound;
        }
    }
}

/// In-place Fisher–Yates shuffle: for `i` from `n-1` down to `1`, swap
/// element `i` with element `uniform_below(i + 1)`.
pub fn shuffle<T, R: RngCore>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_below_stays_in_range() {
        let mut rng = seeded(3);
        for bound in [1u64, 2, 3, 7, 1000, u64::MAX] {
            for _ in 0..100 {
                assert!(uniform_below(&mut rng, bound) < bound);
            }
        }
    }

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b = a.clone();
        shuffle(&mut seeded(9), &mut a);
        shuffle(&mut seeded(9), &mut b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(a, sorted);
    }

    #[test]
    fn shuffle_handles_tiny_slices() {
        let mut empty: Vec<u8> = vec![];
        shuffle(&mut seeded(0), &mut empty);
        let mut one = vec![5];
        shuffle(&mut seeded(0), &mut one);
        assert_eq!(one, vec![5]);
    }
}
