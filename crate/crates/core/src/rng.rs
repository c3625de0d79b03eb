//! Seeded random streams.
//!
//! Every stochastic choice in the crate goes through [`seeded`], a ChaCha8
//! stream keyed with `seed_from_u64`. Anchor bank generation only consumes
//! raw `next_u64` words through [`bounded`] and [`coin`], so the bank bit
//! stream is fully described by the ChaCha8 keystream and these two maps.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integer in `0..n` via the multiply-shift map `(u64 * n) >> 64`.
pub fn bounded(rng: &mut Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Fair coin from the top bit of one word.
pub fn coin(rng: &mut Rng) -> bool {
    rng.next_u64() >> 63 == 1
}

/// Derive a child seed; used to give each block, image or trial its own stream.
pub fn derive(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_stays_in_range() {
        let mut rng = seeded(1);
        for n in 1..50 {
            for _ in 0..100 {
                assert!(bounded(&mut rng, n) < n);
            }
        }
    }

    #[test]
    fn derive_separates_indices() {
        assert_ne!(derive(7, 0), derive(7, 1));
        assert_ne!(derive(7, 0), derive(8, 0));
        assert_eq!(derive(3, 9), derive(3, 9));
    }
}
