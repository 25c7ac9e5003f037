//! Joint training of encoder, decoder and classifier, model selection on
//! class-balanced validation accuracy, and mean-code prediction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datasets::{group_metrics, GroupMetrics, GroupedDataset, Splits};
use crate::error::{Error, Result};
use crate::networks::{Architecture, Model};
use crate::objectives::{total_loss, LossBreakdown, ObjectiveConfig};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::rng::{purpose, stream, SeededRng};
use crate::scalar::Scalar;
use crate::shortcut::{correlation_weights, ShortcutWeights, Weighting};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_cons: f64,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub isotropic: bool,
    pub weighting: Weighting,
    pub patience: usize,
    pub hidden: usize,
    pub conv_channels: Vec<usize>,
    /// Dataset directory; interpreted by the caller.
    pub dataset: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            lambda_cons: 10.0,
            latent_dim: 10,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            isotropic: false,
            weighting: Weighting::Unweighted,
            patience: 10,
            hidden: 128,
            conv_channels: vec![16, 32],
            dataset: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 15] = [
        "alpha",
        "beta",
        "lambda_cons",
        "latent_dim",
        "epochs",
        "batch_size",
        "learning_rate",
        "optimizer",
        "seed",
        "isotropic",
        "weighting",
        "patience",
        "hidden",
        "conv_channels",
        "dataset",
    ];

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda_cons: self.lambda_cons,
            isotropic: self.isotropic,
            weighting: self.weighting,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { conv_channels: self.conv_channels.clone(), hidden: self.hidden, ..Architecture::small(self.latent_dim) }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        self.architecture().validate()?;
        if self.latent_dim == 0 {
            return Err(Error::invalid("config", "latent_dim must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("config", "batch_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("config", "learning_rate must be positive"));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::invalid("config", format!("cannot parse {key} = {value:?}")))
        }
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda_cons" => self.lambda_cons = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "optimizer" => self.optimizer = value.trim().parse()?,
            "seed" => self.seed = parse(key, value)?,
            "isotropic" => self.isotropic = parse(key, value)?,
            "weighting" => {
                self.weighting = match value.trim() {
                    "unweighted" => Weighting::Unweighted,
                    "class_balanced" => Weighting::ClassBalanced,
                    other => return Err(Error::invalid("config", format!("unknown weighting {other:?}"))),
                }
            }
            "patience" => self.patience = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "conv_channels" => {
                self.conv_channels = value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?;
            }
            "dataset" => self.dataset = value.trim().to_string(),
            other => return Err(Error::invalid("config", format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }
}

/// Splits used by [`train`]; the test splits only feed the per-epoch log.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a GroupedDataset,
    pub val: &'a GroupedDataset,
    pub test_in: Option<&'a GroupedDataset>,
    pub test_ood: Option<&'a GroupedDataset>,
}

impl<'a> From<&'a Splits> for TrainData<'a> {
    fn from(s: &'a Splits) -> Self {
        Self { train: &s.train, val: &s.val, test_in: Some(&s.test_in), test_ood: Some(&s.test_ood) }
    }
}

/// One row of the metrics log. Accuracies on absent splits are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub robust_ce: f64,
    pub consistency: f64,
    pub total: f64,
    pub val_balanced_acc: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub worst_group: f64,
    /// Best validation score seen so far, this epoch included.
    pub best_val_balanced_acc: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,recon,kl,robust_ce,consistency,total,val_balanced_acc,id_acc,ood_acc,worst_group";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.recon,
            self.kl,
            self.robust_ce,
            self.consistency,
            self.total,
            self.val_balanced_acc,
            self.id_acc,
            self.ood_acc,
            self.worst_group
        )
    }
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint<T> {
    pub model: Model<T>,
    pub epoch: usize,
    pub val_balanced_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: ExperimentConfig,
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub epoch: usize,
    pub best: Option<BestCheckpoint<T>>,
    pub history: Vec<EpochRecord>,
    /// Mean batch shortcut scores per epoch.
    pub v_trajectory: Vec<Vec<f64>>,
    /// Set when training stopped on a non-finite value.
    pub aborted: Option<String>,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.architecture(), &mut stream(config.seed, purpose::INIT))?;
        let shapes: Vec<&[usize]> = model.params().into_iter().map(|(_, t)| t.shape()).collect();
        let optimizer = Optimizer::new(
            config.optimizer,
            AdamConfig { lr: config.learning_rate, ..AdamConfig::default() },
            &shapes,
        );
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            epoch: 0,
            best: None,
            history: Vec::new(),
            v_trajectory: Vec::new(),
            aborted: None,
        })
    }

    /// The selected model: best on validation, else the current one.
    pub fn selected(&self) -> &Model<T> {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
        for r in &self.history {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn v_trajectory_csv(&self) -> String {
        let m = self.config.latent_dim;
        let mut out = String::from("epoch");
        for j in 1..=m {
            out.push_str(&format!(",v{j}"));
        }
        out.push('\n');
        for (e, v) in self.v_trajectory.iter().enumerate() {
            out.push_str(&(e + 1).to_string());
            for x in v {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }
}

struct Streams {
    shuffle: SeededRng,
    reparam: SeededRng,
    perturb: SeededRng,
}

/// One optimizer step on a mini-batch. Parameters are untouched when the
/// loss or any gradient is non-finite.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    images: &Tensor<T>,
    labels: &[usize],
    objective: &ObjectiveConfig,
    reparam_rng: &mut SeededRng,
    perturb_rng: &mut SeededRng,
) -> Result<(LossBreakdown, ShortcutWeights<T>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let graph = total_loss(&mut tape, &vars, images, labels, objective, reparam_rng, perturb_rng)?;
    tape.backward(graph.total)?;
    let mut grads = Vec::with_capacity(vars.all().len());
    for &v in vars.all() {
        let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        grads.push(g);
    }
    optimizer.step(model.params_mut(), &grads)?;
    Ok((graph.breakdown(&tape), graph.weights))
}

pub fn train<T: Scalar>(config: &ExperimentConfig, data: TrainData<'_>) -> Result<TrainState<T>> {
    train_with(config, data, |_| {})
}

/// Runs up to `config.epochs` epochs, calling `on_epoch` after each one.
pub fn train_with<T: Scalar>(
    config: &ExperimentConfig,
    data: TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState<T>> {
    let mut state = TrainState::<T>::init(config)?;
    if data.train.len() < 2 {
        return Err(Error::invalid("train", "training split needs at least 2 examples"));
    }
    let objective = config.objective();
    let mut rngs = Streams {
        shuffle: stream(config.seed, purpose::SHUFFLE),
        reparam: stream(config.seed, purpose::REPARAM),
        perturb: stream(config.seed, purpose::PERTURB),
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut since_best = 0;
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rngs.shuffle);
        let mut sums = LossBreakdown::default();
        let mut v_sum = vec![0.0; config.latent_dim];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images = data.train.batch::<T>(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.y[i] as usize).collect();
            match train_step(&mut state.model, &mut state.optimizer, &images, &labels, &objective, &mut rngs.reparam, &mut rngs.perturb) {
                Ok((loss, w)) => {
                    sums.recon += loss.recon;
                    sums.kl += loss.kl;
                    sums.robust_ce += loss.robust_ce;
                    sums.consistency += loss.consistency;
                    sums.total += loss.total;
                    v_sum.iter_mut().zip(&w.v).for_each(|(s, x)| *s += x.as_f64());
                    batches += 1;
                }
                Err(Error::NonFinite(what)) => {
                    state.aborted = Some(format!("non-finite {what} in epoch {epoch}, batch {}", batches + 1));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let nb = batches.max(1) as f64;
        state.epoch = epoch;
        state.v_trajectory.push(v_sum.iter().map(|s| s / nb).collect());

        let val = evaluate(&state.model, data.val)?;
        let improved = state.best.as_ref().is_none_or(|b| val.balanced > b.val_balanced_acc);
        if improved {
            state.best = Some(BestCheckpoint { model: state.model.clone(), epoch, val_balanced_acc: val.balanced });
            since_best = 0;
        } else {
            since_best += 1;
        }
        let id = data.test_in.map(|d| evaluate(&state.model, d)).transpose()?;
        let ood = data.test_ood.map(|d| evaluate(&state.model, d)).transpose()?;
        let record = EpochRecord {
            epoch,
            recon: sums.recon / nb,
            kl: sums.kl / nb,
            robust_ce: sums.robust_ce / nb,
            consistency: sums.consistency / nb,
            total: sums.total / nb,
            val_balanced_acc: val.balanced,
            id_acc: id.as_ref().map_or(f64::NAN, |m| m.micro),
            ood_acc: ood.as_ref().map_or(f64::NAN, |m| m.micro),
            worst_group: ood.as_ref().map_or(f64::NAN, |m| m.worst_group),
            best_val_balanced_acc: state.best.as_ref().map_or(f64::NAN, |b| b.val_balanced_acc),
        };
        on_epoch(&record);
        state.history.push(record);
        if since_best >= config.patience {
            break;
        }
    }
    Ok(state)
}

const PREDICT_CHUNK: usize = 256;

/// Labels from `argmax f(mu(x))`; ties go to the lowest class index.
/// Consumes no randomness.
pub fn predict_images<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
    let (mu, _) = model.encode_values(images)?;
    Ok(model.classify_values(&mu)?.argmax_rows())
}

pub fn predict<T: Scalar>(model: &Model<T>, data: &GroupedDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        out.extend(predict_images(model, &data.batch::<T>(chunk))?);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &GroupedDataset) -> Result<GroupMetrics> {
    group_metrics(&predict(model, data)?, data)
}

/// Posterior means of a whole split.
pub fn encode_split<T: Scalar>(model: &Model<T>, data: &GroupedDataset) -> Result<Tensor<T>> {
    let m = model.arch.latent_dim;
    let mut mu = Vec::with_capacity(data.len() * m);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let (part, _) = model.encode_values(&data.batch::<T>(chunk))?;
        mu.extend_from_slice(part.data());
    }
    Tensor::new(&[data.len(), m], mu)
}

/// Shortcut scores computed over an entire split at once.
pub fn split_weights<T: Scalar>(model: &Model<T>, data: &GroupedDataset, weighting: Weighting) -> Result<ShortcutWeights<T>> {
    correlation_weights(&encode_split(model, data)?, &data.labels(), weighting)
}
