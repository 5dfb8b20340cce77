//! Counter-based deterministic randomness.
//!
//! Every draw is addressed by a key tuple (seed, domain, indices...). The key
//! is mixed into a ChaCha stream id, so draws never depend on call order or
//! on any shared generator state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Domain tags keep unrelated consumers of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    SynthCoefficient = 1,
    WeightInit = 2,
    Shuffle = 3,
    Split = 4,
    Sampling = 5,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key tuple into a single 64-bit stream id.
pub fn stream_id(domain: Domain, key: &[u64]) -> u64 {
    key.iter().fold(mix(domain as u64), |acc, &k| mix(acc ^ mix(k)))
}

/// A generator positioned at the start of the stream addressed by `key`.
pub fn keyed(seed: u64, domain: Domain, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, key));
    rng
}

/// One standard-normal draw addressed by `key`.
pub fn normal(seed: u64, domain: Domain, key: &[u64]) -> f64 {
    keyed(seed, domain, key).sample(StandardNormal)
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation(seed: u64, domain: Domain, key: &[u64], n: usize) -> Vec<usize> {
    let mut rng = keyed(seed, domain, key);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
