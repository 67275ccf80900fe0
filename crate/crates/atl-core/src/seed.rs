//! Deterministic derivation of independent RNG streams.
//!
//! Every random draw in the crate flows through a ChaCha stream whose seed is
//! derived from a master seed and a sequence of role tags (replicate index,
//! sample kind, candidate batch, ...). Two distinct tag sequences give
//! statistically independent streams, and the derivation is a fixed integer
//! computation, so results are reproducible across platforms and are
//! unaffected by thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One round of the splitmix64 output function.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a tag sequence into a single 64-bit stream seed.
#[must_use]
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(0xd6e8_feb8_6659_fd93);
        out ^= splitmix64(&mut state);
    }
    out
}

/// A ChaCha generator seeded from `derive_seed(master, tags)`.
#[must_use]
pub fn rng_from(master: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
    }

    #[test]
    fn distinct_tags_give_distinct_seeds() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[2, 1]);
        let c = derive_seed(7, &[1]);
        let d = derive_seed(8, &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn rng_streams_reproduce() {
        use rand::RngCore;
        let mut r1 = rng_from(42, &[3]);
        let mut r2 = rng_from(42, &[3]);
        assert_eq!(r1.next_u64(), r2.next_u64());
    }
}
