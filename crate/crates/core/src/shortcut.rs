//! Per-dimension shortcut scores and the anisotropic latent perturbation.
//!
//! A latent coordinate whose posterior mean correlates strongly with the
//! label is treated as a shortcut candidate. Its score is the absolute
//! Pearson correlation over a batch, and the perturbation injects Gaussian
//! noise with per-coordinate scale `alpha * v_j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::normal;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerical floor on the variances in the correlation denominator.
pub const CORR_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// Plain batch moments.
    #[default]
    Unweighted,
    /// Each example weighted by `1 / (2 * class frequency in batch)`, so
    /// both classes contribute equal mass to the centered moments.
    ClassBalanced,
}

/// Absolute label correlation of each latent coordinate.
///
/// Holds plain values only: nothing here is attached to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortcutWeights<T> {
    pub v: Vec<T>,
    pub batch_size: usize,
    pub eps: T,
    /// Set when every label in the batch was identical; `v` is then ~0.
    pub single_class: bool,
}

impl<T: Scalar> ShortcutWeights<T> {
    pub fn ones(m: usize) -> Self {
        Self { v: vec![T::one(); m], batch_size: 0, eps: T::lit(CORR_EPS), single_class: false }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &x) in self.v.iter().enumerate() {
            if x > self.v[best] {
                best = j;
            }
        }
        best
    }

    /// Largest and second-largest scores.
    pub fn top_two(&self) -> (T, T) {
        let mut sorted = self.v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        (sorted.first().copied().unwrap_or(T::zero()), sorted.get(1).copied().unwrap_or(T::zero()))
    }
}

/// `v_j = |corr(mu[:, j], y)|` with population moments:
/// `r = cov / (sqrt(max(var_mu, eps)) * sqrt(var_y + eps))`.
///
/// Takes detached values, so no gradient can flow through the result.
pub fn correlation_weights<T: Scalar>(mu: &Tensor<T>, y: &[usize], weighting: Weighting) -> Result<ShortcutWeights<T>> {
    let &[n, m] = mu.shape() else {
        return Err(Error::shape("correlation_weights", &[mu.shape()]));
    };
    if y.len() != n {
        return Err(Error::shape("correlation_weights", &[mu.shape(), &[y.len()]]));
    }
    if n < 2 {
        return Err(Error::invalid("correlation_weights", format!("need at least 2 examples, got {n}")));
    }
    if let Some(&bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange { label: bad, classes: 2 });
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    let single_class = positives == 0 || positives == n;
    let weights: Vec<T> = match weighting {
        Weighting::ClassBalanced if !single_class => {
            let per = [n as f64 / (2.0 * (n - positives) as f64), n as f64 / (2.0 * positives as f64)];
            y.iter().map(|&l| T::lit(per[l])).collect()
        }
        _ => vec![T::one(); n],
    };
    let total: T = weights.iter().copied().sum();
    let yf: Vec<T> = y.iter().map(|&l| T::lit(l as f64)).collect();
    let y_mean = weights.iter().zip(&yf).map(|(&w, &v)| w * v).sum::<T>() / total;
    let yc: Vec<T> = yf.iter().map(|&v| v - y_mean).collect();
    let var_y = weights.iter().zip(&yc).map(|(&w, &v)| w * v * v).sum::<T>() / total;

    let eps = T::lit(CORR_EPS);
    let data = mu.data();
    let mut v = Vec::with_capacity(m);
    for j in 0..m {
        let col = |i: usize| data[i * m + j];
        let mean = (0..n).map(|i| weights[i] * col(i)).sum::<T>() / total;
        let (mut cov, mut var) = (T::zero(), T::zero());
        for i in 0..n {
            let xc = col(i) - mean;
            cov += weights[i] * xc * yc[i];
            var += weights[i] * xc * xc;
        }
        cov /= total;
        var /= total;
        let r = cov / (var.max(eps).sqrt() * (var_y + eps).sqrt());
        v.push(r.abs());
    }
    Ok(ShortcutWeights { v, batch_size: n, eps, single_class })
}

/// Noise offsets `alpha * (v ⊙ e)` with `e ~ N(0, I)` for a `batch x m`
/// latent. With `isotropic`, `v` is replaced by all ones.
pub fn perturbation_noise<T: Scalar>(
    batch: usize,
    v: &[T],
    alpha: T,
    isotropic: bool,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let m = v.len();
    Tensor::from_fn(&[batch, m], |i| {
        let scale = if isotropic { T::one() } else { v[i % m] };
        alpha * scale * normal::<T>(rng)
    })
}

/// `z̄ = z + alpha * (v ⊙ e)`. The offset is a constant on the tape, so
/// gradients pass to `z` unchanged.
pub fn perturb<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    weights: &ShortcutWeights<T>,
    alpha: T,
    isotropic: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    if alpha < T::zero() {
        return Err(Error::invalid("perturb", "alpha must be non-negative"));
    }
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != weights.v.len() {
        return Err(Error::shape("perturb", &[&shape, &[weights.v.len()]]));
    }
    let offset = perturbation_noise(shape[0], &weights.v, alpha, isotropic, rng);
    let c = tape.constant(offset);
    tape.add(z, c)
}
