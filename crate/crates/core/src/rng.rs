//! Named, seed-derived random streams.
//!
//! Every consumer of randomness asks for a stream by name, so adding a new
//! consumer never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a stream name.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in name.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Derive a child seed from `seed` and an index (e.g. per-prompt or per-repeat).
pub fn derive_indexed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5151)))
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "world").random();
        let b: u64 = stream(7, "world").random();
        let c: u64 = stream(7, "target").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_indexed(7, 0), derive_indexed(7, 1));
    }
}
