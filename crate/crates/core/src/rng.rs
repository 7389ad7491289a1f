//! Seeded randomness.
//!
//! Every stochastic routine takes an explicit seed and builds a
//! [`ChaCha8Rng`] from it via `seed_from_u64`. ChaCha8 output is
//! value-stable across `rand_chacha` releases, so runs are bit-reproducible.
//! Independent sub-streams are derived with [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Scalar;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream tag (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `len` draws from N(0, std²), generated in f64 and cast.
pub fn gaussian_vec<T: Scalar>(rng: &mut Rng, len: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
}
