//! Seed derivation for reproducible, splittable random streams.
//!
//! Every randomized component in the crate owns a [`SeededRng`] derived from
//! a user seed and a stream index via [`sub_seed`]. Derived streams are
//! independent of iteration order and worker count, so replicated
//! computations give identical results whether they run serially or in
//! parallel.

use rand::SeedableRng;

/// The deterministic generator used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Derives an independent stream seed from a base seed and a counter.
///
/// splitmix64 finalizer over `seed XOR index * golden-ratio`; adjacent
/// indices give uncorrelated streams.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generator seeded directly from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
