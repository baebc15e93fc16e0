//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded through
//! [`stream`]. A stream is identified by a parent seed and an index; the child
//! seed is `parent ^ splitmix64(index)`. Subject `i` of a cohort uses
//! `master_seed ^ splitmix64(i)`, and each consumer inside a subject (warp,
//! bias field, noise, surgery) takes its own child stream, so results do not
//! depend on generation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer (Steele, Lea & Flood).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(parent: u64, index: u64) -> u64 {
    parent ^ splitmix64(index)
}

pub fn stream(parent: u64, index: u64) -> Rng {
    Rng::seed_from_u64(child_seed(parent, index))
}
