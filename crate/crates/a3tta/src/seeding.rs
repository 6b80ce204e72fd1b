//! Deterministic seed derivation.
//!
//! Every stochastic component draws from its own `ChaCha8Rng` seeded by
//! mixing the run seed with a purpose tag and an index. Components therefore
//! stay independent: adding draws to one never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from `(base, tag, index)` with an FNV-1a fold
/// followed by a splitmix64 finalizer. Stable across platforms.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for chunk in base
        .to_le_bytes()
        .iter()
        .chain(tag.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(*chunk);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG seeded from a derived seed.
pub fn rng_for(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn distinct_tags_and_indices_decorrelate() {
        let mut seen = HashSet::new();
        for tag in ["geom", "xform", "adapt", "init"] {
            for idx in 0..64 {
                assert!(seen.insert(derive_seed(7, tag, idx)));
            }
        }
        // Same inputs reproduce.
        assert_eq!(derive_seed(7, "geom", 3), derive_seed(7, "geom", 3));
        assert_ne!(derive_seed(7, "geom", 3), derive_seed(8, "geom", 3));
    }
}
