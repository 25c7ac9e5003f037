//! Seeded random streams.
//!
//! All randomness flows from a `u64` seed through ChaCha8. Independent
//! consumers get independent streams via [`stream`]; per-example decisions
//! use [`keyed_uniform`], which is counter-based so the value for example
//! `i` does not depend on how many other examples were drawn before it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

/// Well-known stream identifiers.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const REPARAM: u64 = 3;
    pub const PERTURB: u64 = 4;
    pub const LABEL_FLIP: u64 = 10;
    pub const COLOR_FLIP: u64 = 11;
    pub const GLYPH: u64 = 12;
    pub const SPLIT: u64 = 13;
    pub const MONTE_CARLO: u64 = 20;
}

pub fn stream(seed: u64, purpose: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Uniform draw in `[0, 1)` addressed by `(seed, purpose, index)`.
pub fn keyed_uniform(seed: u64, purpose: u64, index: u64) -> f64 {
    let mut rng = stream(seed, purpose);
    // one u64 consumes two 32-bit words
    rng.set_word_pos(u128::from(index) * 2);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn normal<T: Scalar>(rng: &mut impl Rng) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

/// Tensor of i.i.d. standard normal entries.
pub fn normal_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| normal(rng))
}
