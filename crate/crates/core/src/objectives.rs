//! Loss terms and the per-step objective.
//!
//! One call to [`total_loss`] records a full training step on a tape:
//! encode, sample, decode, ELBO terms, shortcut scores from detached means,
//! perturbed latents, then robust cross-entropy plus logit consistency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{classify, decode, encode, reparameterize, LatentBatch, ModelVars};
use crate::scalar::Scalar;
use crate::shortcut::{correlation_weights, perturb, ShortcutWeights, Weighting};
use crate::tensor::Tensor;

/// Weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_cons: f64,
    /// Replace the correlation scores with all ones.
    pub isotropic: bool,
    pub weighting: Weighting,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2.0, lambda_cons: 10.0, isotropic: false, weighting: Weighting::Unweighted }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("alpha", self.alpha), ("beta", self.beta), ("lambda_cons", self.lambda_cons)] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::invalid("objective", format!("{name} must be finite and >= 0, got {x}")));
            }
        }
        Ok(())
    }
}

/// Batch-mean values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub robust_ce: f64,
    pub consistency: f64,
    pub total: f64,
}

/// Squared reconstruction error summed over pixels and KL to `N(0, I)`
/// summed over dimensions, both averaged over the batch.
pub fn vae_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var, mu: Var, log_var: Var) -> Result<(Var, Var)> {
    let batch = T::lit(tape.shape(x)[0] as f64);
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    let recon = tape.scale(sse, T::one() / batch);

    if tape.shape(mu) != tape.shape(log_var) {
        return Err(Error::shape("vae_loss", &[tape.shape(mu), tape.shape(log_var)]));
    }
    let m = T::lit(tape.shape(mu)[1] as f64);
    let mu2 = tape.square(mu);
    let var = tape.exp(log_var);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    let s = tape.sum(b);
    let half = tape.scale(s, T::lit(0.5) / batch);
    let offset = tape.constant(Tensor::scalar(-T::lit(0.5) * m));
    let kl = tape.add(half, offset)?;
    Ok((recon, kl))
}

/// Mean softmax cross-entropy of the perturbed-latent logits.
pub fn robust_ce<T: Scalar>(tape: &mut Tape<T>, logits_bar: Var, y: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits_bar, y)
}

/// Batch mean of `||clean - bar||²`; differentiable through both sides.
pub fn consistency_loss<T: Scalar>(tape: &mut Tape<T>, logits_clean: Var, logits_bar: Var) -> Result<Var> {
    let batch = T::lit(tape.shape(logits_clean)[0] as f64);
    let d = tape.sub(logits_clean, logits_bar)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::one() / batch))
}

/// Everything recorded for one step.
#[derive(Clone, Debug)]
pub struct StepGraph<T> {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub robust_ce: Var,
    pub consistency: Var,
    pub latent: LatentBatch<T>,
    pub z_bar: Var,
    pub logits_clean: Var,
    pub logits_bar: Var,
    pub weights: ShortcutWeights<T>,
}

impl<T: Scalar> StepGraph<T> {
    pub fn breakdown(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: Var| tape.value(v).item().as_f64();
        LossBreakdown {
            recon: get(self.recon),
            kl: get(self.kl),
            robust_ce: get(self.robust_ce),
            consistency: get(self.consistency),
            total: get(self.total),
        }
    }
}

/// Records the joint objective for one mini-batch.
///
/// Reparameterization and perturbation noise come from separate streams,
/// one draw per example and dimension each.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    images: &Tensor<T>,
    labels: &[usize],
    config: &ObjectiveConfig,
    reparam_rng: &mut impl Rng,
    perturb_rng: &mut impl Rng,
) -> Result<StepGraph<T>> {
    config.validate()?;
    if images.rows() != labels.len() {
        return Err(Error::shape("total_loss", &[images.shape(), &[labels.len()]]));
    }
    let x = tape.constant(images.clone());
    let (mu, log_var) = encode(tape, &vars.encoder, x)?;
    let latent = reparameterize(tape, mu, log_var, reparam_rng)?;
    let x_hat = decode(tape, &vars.decoder, latent.z)?;
    let (recon, kl) = vae_loss(tape, x, x_hat, mu, log_var)?;

    let mu_detached = tape.stop_gradient(mu);
    let weights = correlation_weights(tape.value(mu_detached), labels, config.weighting)?;
    let z_bar = perturb(tape, latent.z, &weights, T::lit(config.alpha), config.isotropic, perturb_rng)?;

    let logits_bar = classify(tape, &vars.classifier, z_bar)?;
    let logits_clean = classify(tape, &vars.classifier, latent.z)?;
    let ce = robust_ce(tape, logits_bar, labels)?;
    let consistency = consistency_loss(tape, logits_clean, logits_bar)?;

    let beta_kl = tape.scale(kl, T::lit(config.beta));
    let vae = tape.add(recon, beta_kl)?;
    let lam_cons = tape.scale(consistency, T::lit(config.lambda_cons));
    let clf = tape.add(ce, lam_cons)?;
    let total = tape.add(vae, clf)?;
    if !tape.value(total).is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(StepGraph { total, recon, kl, robust_ce: ce, consistency, latent, z_bar, logits_clean, logits_bar, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    fn kl_of(mu: &[f64], lv: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let n = mu.len();
        let x = tape.constant(Tensor::zeros(&[1, 1]));
        let m = tape.constant(t(&[1, n], mu));
        let l = tape.constant(t(&[1, n], lv));
        let (_, kl) = vae_loss(&mut tape, x, x, m, l).unwrap();
        tape.value(kl).item()
    }

    #[test]
    fn kl_vanishes_at_prior() {
        assert_eq!(kl_of(&[0.0; 4], &[0.0; 4]), 0.0);
    }

    #[test]
    fn kl_unit_mean_shift() {
        assert!((kl_of(&[1.0, 0.0, 0.0], &[0.0; 3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn recon_is_sum_over_pixels_mean_over_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let xh = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 2.0]));
        let z = tape.constant(Tensor::zeros(&[2, 1]));
        let (recon, _) = vae_loss(&mut tape, x, xh, z, z).unwrap();
        assert_eq!(tape.value(recon).item(), (1.0 + 4.0) / 2.0);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let ce = robust_ce(&mut tape, l, &[0]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let c = tape.constant(t(&[1, 2], &[30.0, -30.0]));
        let ce2 = robust_ce(&mut tape, c, &[0]).unwrap();
        assert!(tape.value(ce2).item() < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let ce = robust_ce(&mut tape, l, &[1]).unwrap();
        tape.backward(ce).unwrap();
        let z: f64 = [0.3f64, -1.0, 2.0].iter().map(|x| x.exp()).sum();
        let want = [0.3f64.exp() / z, (-1.0f64).exp() / z - 1.0, 2.0f64.exp() / z];
        for (g, w) in tape.grad(l).unwrap().data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_reference_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        let ab = consistency_loss(&mut tape, a, b).unwrap();
        let ba = consistency_loss(&mut tape, b, a).unwrap();
        let aa = consistency_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(ab).item(), 2.0);
        assert_eq!(tape.value(ba).item(), 2.0);
        assert_eq!(tape.value(aa).item(), 0.0);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let bad = ObjectiveConfig { beta: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let nan = ObjectiveConfig { alpha: f64::NAN, ..Default::default() };
        assert!(nan.validate().is_err());
    }
}
