//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a
//! splitmix64 hash of the run seed and a few coordinates, so streams never
//! depend on the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `h = splitmix(seed)`, then `h = splitmix(h ^ part)` for each part.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |h, &p| splitmix64(h ^ p))
}

/// Seed for a named sample: the id's bytes are folded in one at a time.
pub fn for_id(seed: u64, id: &str) -> u64 {
    derive(seed, &id.bytes().map(u64::from).collect::<Vec<_>>())
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference splitmix64 generator seeded with 0
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn derivation_separates_streams() {
        assert_ne!(derive(1, &[0, 1]), derive(1, &[1, 0]));
        assert_ne!(for_id(7, "a"), for_id(7, "b"));
        assert_eq!(for_id(7, "covid_00001"), for_id(7, "covid_00001"));
    }
}
