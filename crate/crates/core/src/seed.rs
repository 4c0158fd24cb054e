//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed for `(base, key)`; independent of platform and build.
pub fn derive(base: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(base ^ splitmix64(h))
}

/// Stable seed for `(base, index)`.
pub fn derive_index(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_key_sensitive() {
        assert_eq!(derive(7, "S01"), derive(7, "S01"));
        assert_ne!(derive(7, "S01"), derive(7, "S02"));
        assert_ne!(derive(7, "S01"), derive(8, "S01"));
        assert_ne!(derive_index(1, 0), derive_index(1, 1));
        // Frozen so that seeds never drift between releases.
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }
}
