//! Seeded randomness.
//!
//! All randomness in the workspace comes from xoshiro256++ (a 64-bit
//! xorshift-family generator) seeded through SplitMix64, so every run is
//! reproducible from a single `u64` seed.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::element::{lit, Element};
use crate::tensor::TensorOf;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed for a named purpose.
pub fn substream(seed: u64, label: &str) -> Rng {
    // FNV-1a over the label, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

pub fn normal_tensor<T: Element>(rng: &mut Rng, shape: impl Into<Vec<usize>>, std: f64) -> TensorOf<T> {
    TensorOf::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        lit(z * std)
    })
}

pub fn uniform_tensor<T: Element>(rng: &mut Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> TensorOf<T> {
    TensorOf::from_fn(shape, |_| lit(rng.random_range(lo..hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor = normal_tensor(&mut seeded(9), vec![16], 1.0);
        let b: Tensor = normal_tensor(&mut seeded(9), vec![16], 1.0);
        assert_eq!(a, b);
        let c: Tensor = normal_tensor(&mut substream(9, "other"), vec![16], 1.0);
        assert_ne!(a, c);
    }
}
