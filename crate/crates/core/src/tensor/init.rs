//! Parameter initialization.
//!
//! Every parameter draws from its own stream, keyed by `(run seed, name)`.
//! Two model variants that share a parameter name therefore start from
//! identical values, which keeps architecture comparisons honest.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{Scalar, Tensor};

/// FNV-1a over the name, folded with the run seed. Stable across platforms.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    for &b in name.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
pub fn fan_in_uniform<T: Scalar>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive for {name}");
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, name));
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("init length matches shape")
}

/// How a named parameter comes into existence.
#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    /// Fan-in-scaled uniform, the default for weights.
    FanIn { fan_in: usize },
    /// Every element the same value (biases, affine gains).
    Const(f64),
    /// First half one value, second half another. Used for biases of heads
    /// that emit stacked (gain, offset) pairs, so modulation starts near
    /// identity: gains at 1, offsets at 0.
    HalfConst(f64, f64),
}

impl ParamInit {
    pub fn build<T: Scalar>(self, seed: u64, name: &str, shape: &[usize]) -> Tensor<T> {
        match self {
            ParamInit::FanIn { fan_in } => fan_in_uniform(seed, name, shape, fan_in),
            ParamInit::Const(v) => {
                let len = shape.iter().product();
                Tensor::new(shape, vec![T::from_f64(v); len]).expect("init length matches shape")
            }
            ParamInit::HalfConst(a, b) => {
                let len: usize = shape.iter().product();
                assert!(len % 2 == 0, "half-const init needs an even length for {name}");
                let data = (0..len)
                    .map(|i| T::from_f64(if i < len / 2 { a } else { b }))
                    .collect();
                Tensor::new(shape, data).expect("init length matches shape")
            }
        }
    }
}
