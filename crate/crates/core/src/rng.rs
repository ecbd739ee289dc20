//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream derived
//! from the run seed plus a static label and integer coordinates (epoch,
//! iteration, image index...). Runs with the same seed are bit-identical
//! regardless of scheduling, and an adaptation resumed from a checkpoint
//! re-derives exactly the streams an uninterrupted run would have used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Fold a label and coordinates into a single sub-seed.
pub fn derive_seed(seed: u64, label: &str, coords: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ 0x5bf0_3635_63c4_8d5d);
    for byte in label.as_bytes() {
        acc = splitmix64(acc ^ u64::from(*byte));
    }
    for c in coords {
        acc = splitmix64(acc ^ *c);
    }
    acc
}

/// A ChaCha stream for `(seed, label, coords)`.
pub fn derive_rng(seed: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, coords))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "a", &[1, 2]), derive_seed(7, "a", &[1, 2]));
        assert_ne!(derive_seed(7, "a", &[1, 2]), derive_seed(7, "b", &[1, 2]));
        assert_ne!(derive_seed(7, "a", &[1, 2]), derive_seed(7, "a", &[2, 1]));
        assert_ne!(derive_seed(7, "a", &[]), derive_seed(8, "a", &[]));
    }
}
