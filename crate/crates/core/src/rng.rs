//! Seeded randomness. Every stochastic routine takes an explicit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a global seed with a stream index (splitmix64 finalizer), giving
/// independent per-item streams whose output does not depend on iteration
/// order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal_vec(rng: &mut Rng, len: usize, std_dev: f64) -> alloc::vec::Vec<f64> {
    let dist = Normal::new(0.0, std_dev).expect("finite positive std dev");
    (0..len).map(|_| dist.sample(rng)).collect()
}
