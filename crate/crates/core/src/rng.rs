//! Deterministic seed derivation.
//!
//! Every random draw in a rollout comes from a ChaCha stream keyed by a hash
//! of structural coordinates (run seed, tree index, parent node, branch
//! ordinal), so results never depend on batch composition or thread timing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a list of coordinates.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_0F_7EE5_u64, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}
