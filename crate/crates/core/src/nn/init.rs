//! Seeded parameter initializers. Samples are drawn in `f64` and cast, so the
//! 32-bit and 64-bit builds of a model start from the same values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;

use crate::tensor::Scalar;

/// Independent stream for a named component of a seeded build.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = crate::digest::Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(tag.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

pub fn he_normal<T: Scalar>(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect()
}

/// Normal(0, std²) truncated to ±2·std by resampling.
pub fn trunc_normal<T: Scalar>(rng: &mut impl Rng, std: f64, len: usize) -> Vec<T> {
    (0..len)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect()
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, bound: f64, len: usize) -> Vec<T> {
    (0..len).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
}
