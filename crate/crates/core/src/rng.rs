//! Seeded random streams. Every random draw in the crate comes from a
//! [`ChaCha8Rng`] derived from a root seed, so runs are reproducible and
//! independent streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed (splitmix64 finaliser).
pub fn split(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Entries drawn uniformly from {-1, +1}.
pub fn rademacher_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    use rand::Rng as _;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
