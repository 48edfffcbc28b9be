//! Seeded randomness shared by initialization, data synthesis and dropout.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

/// The one RNG used throughout the crate. ChaCha8 gives identical streams on
/// every platform, which the bit-reproducibility guarantees rely on.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a label.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng, bound: f64) -> f64 {
    rng.random_range(-bound..bound)
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    rng.random_bool(p)
}

pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    items.shuffle(rng);
}
