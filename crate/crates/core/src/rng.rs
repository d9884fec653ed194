//! Seeded random streams.
//!
//! Every random draw in the pipeline comes from a [`SeededRng`] derived from
//! the run seed plus a stream label, so runs are reproducible and
//! independent streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a seed with stream labels (splitmix64 finalizer per label).
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut s = seed;
    for &l in labels {
        s ^= l.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s << 6).wrapping_add(s >> 2);
        let mut z = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}

pub fn stream(seed: u64, labels: &[u64]) -> SeededRng {
    seeded(derive_seed(seed, labels))
}

pub fn gaussian_vec<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
