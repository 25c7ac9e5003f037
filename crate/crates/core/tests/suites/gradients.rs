//! Reverse-mode gradients against central differences for every op.

use proptest::prelude::*;
use rand::Rng;
use sitar::autodiff::{Tape, Var};
use sitar::gradcheck::fd_gradient;
use sitar::networks::{Architecture, ImageShape, Model};
use sitar::objectives::{total_loss, ObjectiveConfig};
use sitar::rng::stream;
use sitar::tensor::Tensor;
use sitar::Result;

type Op = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = stream(seed, 99);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed, 0.1, 1.0).zip_map(&random(shape, seed + 1, -1.0, 1.0), "sign", |a, s| a * s.signum()).unwrap()
}

/// Projects the op output onto fixed random weights and compares the
/// resulting gradient with finite differences, input by input.
fn check(inputs: &[Tensor<f64>], op: &Op, seed: u64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars).unwrap();
    let w = random(tape.shape(out), seed ^ 0xabc, -1.0, 1.0);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = fd_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, orig)| t.constant(if j == k { probe.clone() } else { orig.clone() }))
                    .collect();
                let o = op(&mut t, &vs)?;
                Ok(t.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
            },
            x,
            1e-6,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-6 + 1e-5 * a.abs().max(n.abs()), "input {k}: autodiff {a} vs fd {n}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    fn elementwise_binary(r in 1usize..4, c in 1usize..5, seed in 0u64..1000) {
        let (a, b) = (random(&[r, c], seed, -2.0, 2.0), random(&[r, c], seed + 7, -2.0, 2.0));
        check(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), seed);
        check(&[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]), seed);
        check(&[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]), seed);
        check(&[a, b], &|t, v| t.mul(v[0], v[0]), seed);
    }

    fn elementwise_unary(r in 1usize..4, c in 1usize..5, seed in 0u64..1000) {
        let x = away_from_zero(&[r, c], seed);
        check(&[x.clone()], &|t, v| Ok(t.scale(v[0], -1.7)), seed);
        check(&[x.clone()], &|t, v| Ok(t.relu(v[0])), seed);
        check(&[x.clone()], &|t, v| Ok(t.tanh(v[0])), seed);
        check(&[x.clone()], &|t, v| Ok(t.exp(v[0])), seed);
        check(&[x.clone()], &|t, v| Ok(t.square(v[0])), seed);
        check(&[x.map(|a| a.abs() + 0.2)], &|t, v| Ok(t.log(v[0])), seed);
    }

    fn reductions_and_shapes(r in 1usize..4, c in 1usize..5, seed in 0u64..1000) {
        let x = random(&[r, c], seed, -2.0, 2.0);
        let y = random(&[r, 2], seed + 3, -2.0, 2.0);
        check(&[x.clone()], &|t, v| Ok(t.sum(v[0])), seed);
        check(&[x.clone()], &|t, v| Ok(t.mean(v[0])), seed);
        check(&[x.clone()], &move |t, v| t.reshape(v[0], &[r * c]), seed);
        check(&[x.clone(), y.clone()], &|t, v| t.concat(&[v[0], v[1]], 1), seed);
        check(&[x.clone(), x], &|t, v| t.concat(&[v[0], v[1]], 0), seed);
    }

    fn linear_algebra(n in 1usize..4, k in 1usize..5, m in 1usize..4, seed in 0u64..1000) {
        let a = random(&[n, k], seed, -1.0, 1.0);
        let b = random(&[k, m], seed + 1, -1.0, 1.0);
        let bias = random(&[m], seed + 2, -1.0, 1.0);
        check(&[a.clone(), b.clone()], &|t, v| t.matmul(v[0], v[1]), seed);
        check(&[a.clone(), b, bias], &|t, v| { let h = t.matmul(v[0], v[1])?; t.add_row_bias(h, v[2]) }, seed);
    }

    fn softmax_and_cross_entropy(n in 1usize..4, c in 2usize..5, seed in 0u64..1000) {
        let x = random(&[n, c], seed, -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % c).collect();
        check(&[x.clone()], &|t, v| t.softmax(v[0]), seed);
        check(&[x], &move |t, v| t.cross_entropy(v[0], &labels), seed);
    }

    fn convolutions(n in 1usize..3, cin in 1usize..3, cout in 1usize..3, hw in prop::sample::select(vec![2usize, 4, 6]), seed in 0u64..1000) {
        let x = random(&[n, cin, hw, hw], seed, -1.0, 1.0);
        let w = random(&[cout, cin, 4, 4], seed + 1, -0.5, 0.5);
        let b = random(&[cout], seed + 2, -0.5, 0.5);
        check(&[x, w, b], &|t, v| t.conv2d(v[0], v[1], v[2], 2, 1), seed);
        let xt = random(&[n, cin, hw / 2, hw / 2], seed + 3, -1.0, 1.0);
        let wt = random(&[cin, cout, 4, 4], seed + 4, -0.5, 0.5);
        let bt = random(&[cout], seed + 5, -0.5, 0.5);
        check(&[xt, wt, bt], &|t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1), seed);
    }
}

/// The full training objective on a tiny model, with isotropic noise so the
/// stop-gradient scores do not enter the loss.
pub fn whole_objective_matches_finite_differences() {
    let arch = Architecture {
        image: ImageShape { channels: 3, height: 8, width: 8 },
        conv_channels: vec![2, 3],
        latent_dim: 3,
        hidden: 4,
        classes: 2,
    };
    let mut model = Model::<f64>::new(arch, &mut stream(5, 1)).unwrap();
    // zero biases would put whole ReLU layers exactly on the kink
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (k, p) in model.params_mut().into_iter().enumerate() {
        if names[k].ends_with("bias") {
            *p = random(p.shape(), 40 + k as u64, 0.05, 0.3);
        }
    }
    let images = random(&[4, 3, 8, 8], 11, 0.0, 1.0);
    let labels = [0, 1, 1, 0];
    let cfg = ObjectiveConfig { isotropic: true, ..Default::default() };
    let loss_of = |m: &Model<f64>| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        let g = total_loss(&mut tape, &vars, &images, &labels, &cfg, &mut stream(3, 3), &mut stream(3, 4))?;
        Ok((tape, vars.all().to_vec(), g.total))
    };
    let (mut tape, vars, total) = loss_of(&model).unwrap();
    tape.backward(total).unwrap();
    for (k, name) in names.iter().enumerate() {
        let x = model.params()[k].1.clone();
        let numeric = fd_gradient(
            |probe| {
                let mut m = model.clone();
                *m.params_mut()[k] = probe.clone();
                let (t, _, total) = loss_of(&m)?;
                Ok(t.value(total).item())
            },
            &x,
            1e-6,
        )
        .unwrap();
        let analytic = tape.grad(vars[k]).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-5 + 1e-4 * a.abs().max(n.abs()), "{name}: autodiff {a} vs fd {n}");
        }
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("reductions_and_shapes", reductions_and_shapes),
    ("linear_algebra", linear_algebra),
    ("softmax_and_cross_entropy", softmax_and_cross_entropy),
    ("convolutions", convolutions),
    ("whole_objective_matches_finite_differences", whole_objective_matches_finite_differences),
];
