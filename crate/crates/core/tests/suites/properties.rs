//! Statistical oracles and invariances for the objective, the shortcut
//! proxy, the data pipeline and training.

use proptest::prelude::*;
use rand::Rng;
use sitar::autodiff::Tape;
use sitar::datasets::{build_colormnist, majority_only_split, synth_digits, ColorMnistConfig, SplitKind, Splits};
use sitar::networks::{classify, decode, encode, reparameterize, Architecture, ImageShape, Model};
use sitar::objectives::{robust_ce, vae_loss, ObjectiveConfig};
use sitar::optim::{AdamConfig, Optimizer, OptimizerKind};
use sitar::rng::{normal, purpose, stream};
use sitar::shortcut::{correlation_weights, perturbation_noise, Weighting};
use sitar::tensor::Tensor;
use sitar::train::{train, train_step, ExperimentConfig, TrainData};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn kl_closed_form(mu: &[f64], lv: &[f64]) -> f64 {
    let m = mu.len();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1]));
    let mu_v = tape.constant(tensor(&[1, m], mu.to_vec()));
    let lv_v = tape.constant(tensor(&[1, m], lv.to_vec()));
    let (_, kl) = vae_loss(&mut tape, x, x, mu_v, lv_v).unwrap();
    tape.value(kl).item()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    /// `E_q[log q(z) - log p(z)]` by sampling, against the closed form.
    fn kl_matches_monte_carlo(
        mu in prop::collection::vec(-1.5f64..1.5, 4),
        lv in prop::collection::vec(-2.0f64..1.0, 4),
        seed in 0u64..1000,
    ) {
        let exact = kl_closed_form(&mu, &lv);
        prop_assume!(exact > 0.5);
        let n = 1_000_000;
        let mut rng = stream(seed, purpose::MONTE_CARLO);
        let mut acc = 0.0;
        for _ in 0..n {
            for j in 0..4 {
                let e: f64 = normal(&mut rng);
                let z = mu[j] + (0.5 * lv[j]).exp() * e;
                // log q - log p, constants cancel
                acc += -0.5 * lv[j] - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        prop_assert!((mc - exact).abs() <= 0.01 * exact, "mc {mc} vs closed form {exact}");
    }
}

fn scores(mu: &Tensor<f64>, y: &[usize]) -> Vec<f64> {
    correlation_weights(mu, y, Weighting::Unweighted).unwrap().v
}

fn labels_with_both_classes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..2, 24).prop_filter("both classes", |y| y.contains(&0) && y.contains(&1))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    fn pearson_ignores_affine_maps_of_each_column(
        data in prop::collection::vec(-3.0f64..3.0, 24 * 3),
        y in labels_with_both_classes(),
        scale in prop::collection::vec(prop_oneof![0.2f64..5.0, -5.0f64..-0.2], 3),
        shift in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        let mu = tensor(&[24, 3], data.clone());
        let mapped = tensor(&[24, 3], data.iter().enumerate().map(|(i, &x)| scale[i % 3] * x + shift[i % 3]).collect());
        for (a, b) in scores(&mu, &y).iter().zip(scores(&mapped, &y)) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    fn pearson_ignores_row_order_and_label_flips(
        data in prop::collection::vec(-3.0f64..3.0, 24 * 3),
        y in labels_with_both_classes(),
        seed in 0u64..10_000,
    ) {
        use rand::seq::SliceRandom;
        let mu = tensor(&[24, 3], data.clone());
        let base = scores(&mu, &y);

        let mut perm: Vec<usize> = (0..24).collect();
        perm.shuffle(&mut stream(seed, 0));
        let pmu = tensor(&[24, 3], perm.iter().flat_map(|&i| data[i * 3..i * 3 + 3].to_vec()).collect());
        let py: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        for (a, b) in base.iter().zip(scores(&pmu, &py)) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        let flipped: Vec<usize> = y.iter().map(|&l| 1 - l).collect();
        for (a, b) in base.iter().zip(scores(&mu, &flipped)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(base.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }
}

fn sample_covariance(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mean: Vec<f64> = (0..m).map(|j| (0..n).map(|i| d[i * m + j]).sum::<f64>() / n as f64).collect();
    (0..m)
        .map(|a| {
            (0..m)
                .map(|b| (0..n).map(|i| (d[i * m + a] - mean[a]) * (d[i * m + b] - mean[b])).sum::<f64>() / n as f64)
                .collect()
        })
        .collect()
}

pub fn perturbation_covariance_is_alpha_squared_diag_v_squared() {
    let v = [0.9, 0.5, 0.2, 0.05, 0.7];
    for (alpha, isotropic) in [(1.0, false), (0.3, false), (2.0, true)] {
        let noise = perturbation_noise(200_000, &v, alpha, isotropic, &mut stream(5, purpose::PERTURB));
        let cov = sample_covariance(&noise);
        for a in 0..5 {
            let sa = alpha * if isotropic { 1.0 } else { v[a] };
            for b in 0..5 {
                let sb = alpha * if isotropic { 1.0 } else { v[b] };
                if a == b {
                    let want = sa * sa;
                    assert!((cov[a][a] - want).abs() <= 0.03 * want, "var {a}: {} vs {want}", cov[a][a]);
                } else {
                    assert!(cov[a][b].abs() <= 0.03 * sa * sb, "cov {a},{b}: {}", cov[a][b]);
                }
            }
        }
    }
}

pub fn reparameterized_samples_have_posterior_moments() {
    let (mu, lv) = ([0.5, -1.0, 2.0], [0.0, -1.5, 0.8]);
    let n = 200_000;
    let mut tape = Tape::new();
    let mu_v = tape.constant(Tensor::from_fn(&[n, 3], |i| mu[i % 3]));
    let lv_v = tape.constant(Tensor::from_fn(&[n, 3], |i| lv[i % 3]));
    let latent = reparameterize(&mut tape, mu_v, lv_v, &mut stream(9, purpose::REPARAM)).unwrap();
    let z = tape.value(latent.z).clone();
    let cov = sample_covariance(&z);
    for j in 0..3 {
        let var = lv[j].exp();
        let mean = (0..n).map(|i| z.data()[i * 3 + j]).sum::<f64>() / n as f64;
        assert!((mean - mu[j]).abs() < 4.0 * (var / n as f64).sqrt(), "mean {j}: {mean}");
        assert!((cov[j][j] - var).abs() <= 0.03 * var, "var {j}: {} vs {var}", cov[j][j]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    fn majority_only_is_pure(p_d in 0.0f64..0.5, p_c in 0.0f64..0.5, seed in 0u64..1000) {
        let cfg = ColorMnistConfig { p_d, p_c_in: p_c, p_c_out: 1.0 - p_c, seed };
        let s = Splits::synthetic(300, 50, &cfg, 0.1).unwrap();
        for d in [&s.train, &s.val] {
            let m = majority_only_split(d).unwrap();
            prop_assert!(!m.is_empty());
            prop_assert!((0..m.len()).all(|i| m.y[i] == m.c[i]));
        }
    }
}

/// Observed flip counts stay within three binomial standard deviations.
pub fn flip_rates_match_configuration() {
    let raw = synth_digits(20_000, 4, 2);
    let cfg = ColorMnistConfig { p_d: 0.25, p_c_in: 0.1, p_c_out: 0.9, seed: 4 };
    for (kind, p_c) in [(SplitKind::Train, 0.1), (SplitKind::TestOod, 0.9)] {
        let d = build_colormnist(&raw, &cfg, kind).unwrap();
        let n = d.len() as f64;
        let label_flips = (0..d.len()).filter(|&i| d.y[i] != u8::from(raw.labels[i] >= 5)).count() as f64;
        let color_flips = (0..d.len()).filter(|&i| d.c[i] != d.y[i]).count() as f64;
        for (count, p) in [(label_flips, 0.25), (color_flips, p_c)] {
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((count - n * p).abs() <= 3.0 * sd, "{kind:?}: {count} flips, expected {} +- {}", n * p, 3.0 * sd);
        }
    }
}

fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        latent_dim: 4,
        hidden: 16,
        conv_channels: vec![4, 8],
        batch_size: 32,
        epochs: 2,
        seed,
        ..ExperimentConfig::default()
    }
}

fn checkpoint_bytes(m: &Model<f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    m.write_checkpoint(&mut buf).unwrap();
    buf
}

pub fn training_is_bitwise_reproducible_per_seed() {
    let s = Splits::synthetic(200, 40, &ColorMnistConfig::default(), 0.1).unwrap();
    let run = |seed| train::<f64>(&tiny_config(seed), TrainData::from(&s)).unwrap();
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.v_trajectory_csv(), b.v_trajectory_csv());
    assert_ne!(checkpoint_bytes(&a.model), checkpoint_bytes(&c.model));
}

/// Plain ELBO plus cross-entropy on the sampled code, built op by op.
fn reference_step(
    model: &mut Model<f64>,
    opt: &mut Optimizer<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    beta: f64,
    reparam: &mut impl Rng,
) -> f64 {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let (mu, lv) = encode(&mut tape, &vars.encoder, x).unwrap();
    let latent = reparameterize(&mut tape, mu, lv, reparam).unwrap();
    let x_hat = decode(&mut tape, &vars.decoder, latent.z).unwrap();
    let (recon, kl) = vae_loss(&mut tape, x, x_hat, mu, lv).unwrap();
    let logits = classify(&mut tape, &vars.classifier, latent.z).unwrap();
    let ce = robust_ce(&mut tape, logits, labels).unwrap();
    let bkl = tape.scale(kl, beta);
    let elbo = tape.add(recon, bkl).unwrap();
    let total = tape.add(elbo, ce).unwrap();
    tape.backward(total).unwrap();
    let grads: Vec<Tensor<f64>> =
        vars.all().iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();
    opt.step(model.params_mut(), &grads).unwrap();
    tape.value(total).item()
}

pub fn zero_alpha_zero_lambda_is_elbo_plus_ce() {
    let s = Splits::synthetic(160, 10, &ColorMnistConfig::default(), 0.0).unwrap();
    let arch = Architecture {
        image: ImageShape { channels: 3, height: 28, width: 28 },
        conv_channels: vec![4, 8],
        latent_dim: 3,
        hidden: 8,
        classes: 2,
    };
    let init = Model::<f64>::new(arch, &mut stream(2, purpose::INIT)).unwrap();
    let shapes: Vec<&[usize]> = init.params().into_iter().map(|(_, t)| t.shape()).collect();
    let new_opt = || Optimizer::new(OptimizerKind::Adam, AdamConfig::default(), &shapes);
    let (mut sitar_model, mut sitar_opt) = (init.clone(), new_opt());
    let (mut ref_model, mut ref_opt) = (init.clone(), new_opt());
    let objective = ObjectiveConfig { alpha: 0.0, lambda_cons: 0.0, ..ObjectiveConfig::default() };
    let (mut rep_a, mut rep_b) = (stream(2, purpose::REPARAM), stream(2, purpose::REPARAM));
    let mut perturb = stream(2, purpose::PERTURB);

    let idx: Vec<usize> = (0..s.train.len()).collect();
    for _ in 0..3 {
        for chunk in idx.chunks(32) {
            let images = s.train.batch::<f64>(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| s.train.y[i] as usize).collect();
            let (loss, _) =
                train_step(&mut sitar_model, &mut sitar_opt, &images, &labels, &objective, &mut rep_a, &mut perturb)
                    .unwrap();
            let want = reference_step(&mut ref_model, &mut ref_opt, &images, &labels, objective.beta, &mut rep_b);
            assert!((loss.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", loss.total);
            assert_eq!(loss.consistency, 0.0);
            for ((name, a), (_, b)) in sitar_model.params().iter().zip(ref_model.params()) {
                for (p, q) in a.data().iter().zip(b.data()) {
                    assert!((p - q).abs() <= 1e-12, "{name}: {p} vs {q}");
                }
            }
        }
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("kl_matches_monte_carlo", kl_matches_monte_carlo),
    ("pearson_ignores_affine_maps_of_each_column", pearson_ignores_affine_maps_of_each_column),
    ("pearson_ignores_row_order_and_label_flips", pearson_ignores_row_order_and_label_flips),
    ("perturbation_covariance_is_alpha_squared_diag_v_squared", perturbation_covariance_is_alpha_squared_diag_v_squared),
    ("reparameterized_samples_have_posterior_moments", reparameterized_samples_have_posterior_moments),
    ("majority_only_is_pure", majority_only_is_pure),
    ("flip_rates_match_configuration", flip_rates_match_configuration),
    ("training_is_bitwise_reproducible_per_seed", training_is_bitwise_reproducible_per_seed),
    ("zero_alpha_zero_lambda_is_elbo_plus_ce", zero_alpha_zero_lambda_is_elbo_plus_ce),
];
