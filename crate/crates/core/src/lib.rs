//! Shortcut-invariant classification with correlation-targeted latent noise.
//!
//! A β-VAE learns a disentangled latent code; each latent coordinate is
//! scored by the absolute correlation of its posterior mean with the label,
//! and the classifier is trained on codes perturbed by Gaussian noise scaled
//! per coordinate by that score, plus a logit-consistency penalty between
//! clean and perturbed codes. To second order in the noise scale this is
//! ERM plus a Jacobian penalty weighted by the squared scores; the
//! [`theory`] module checks that expansion numerically.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases below fix the default `f64` instantiation.

pub mod autodiff;
pub mod conv;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod shortcut;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod traversal;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Model = networks::Model<f64>;
pub type ShortcutWeights = shortcut::ShortcutWeights<f64>;
