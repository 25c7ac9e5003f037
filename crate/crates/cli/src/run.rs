//! One training run and its output directory, shared by `train` and `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sitar::datasets::{GroupMetrics, Splits};
use sitar::train::{evaluate, split_weights, train_with, ExperimentConfig, TrainState};

use crate::commands::UsageError;
use crate::manifest::RunManifest;
use crate::ConfigFlags;

/// Defaults, then the config file, then explicit flags.
pub fn resolve_config(flags: &ConfigFlags, data: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| UsageError(e.to_string()))?;
    }
    let mut set = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|e| UsageError(e.to_string()))?;
        }
        Ok(())
    };
    set("alpha", flags.alpha.map(|v| v.to_string()))?;
    set("beta", flags.beta.map(|v| v.to_string()))?;
    set("lambda_cons", flags.lambda_cons.map(|v| v.to_string()))?;
    set("latent_dim", flags.latent_dim.map(|v| v.to_string()))?;
    set("epochs", flags.epochs.map(|v| v.to_string()))?;
    set("batch_size", flags.batch_size.map(|v| v.to_string()))?;
    set("learning_rate", flags.learning_rate.map(|v| v.to_string()))?;
    set("optimizer", flags.optimizer.clone())?;
    set("seed", flags.seed.map(|v| v.to_string()))?;
    set("isotropic", flags.isotropic.map(|v| v.to_string()))?;
    set("weighting", flags.weighting.clone())?;
    set("patience", flags.patience.map(|v| v.to_string()))?;
    set("hidden", flags.hidden.map(|v| v.to_string()))?;
    set("conv_channels", flags.conv_channels.clone())?;
    if let Some(d) = data {
        cfg.dataset = d.display().to_string();
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    if cfg.dataset.is_empty() {
        return Err(UsageError("no dataset: pass --data or set `dataset` in the config file".into()).into());
    }
    Splits::load_dir(&cfg.dataset).with_context(|| format!("loading dataset from {}", cfg.dataset))
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub selected_epoch: usize,
    pub val_balanced_acc: f64,
    pub test_in: GroupMetrics,
    pub test_ood: GroupMetrics,
    pub aborted: Option<String>,
}

/// Trains with `cfg` and writes metrics, scores, checkpoint, group metrics
/// and a manifest into `dir`.
pub fn execute(cfg: &ExperimentConfig, splits: &Splits, dir: &Path, command: &str, quiet: bool) -> Result<RunResult> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = RunManifest::start(command, cfg.seed, cfg)?;
    let state: TrainState<f64> = train_with(cfg, splits.into(), |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  total {:>10.3}  recon {:>9.3}  kl {:>7.3}  val {:.4}  id {:.4}  ood {:.4}",
                r.epoch, r.total, r.recon, r.kl, r.val_balanced_acc, r.id_acc, r.ood_acc
            );
        }
    })?;
    let model = state.selected();
    let val = evaluate(model, &splits.val)?;
    let test_in = evaluate(model, &splits.test_in)?;
    let test_ood = evaluate(model, &splits.test_ood)?;

    let write = |name: &str, body: &[u8]| -> Result<()> {
        fs::write(dir.join(name), body).with_context(|| format!("writing {}/{name}", dir.display()))
    };
    write("metrics.csv", state.metrics_csv().as_bytes())?;
    write("v_trajectory.csv", state.v_trajectory_csv().as_bytes())?;
    let mut groups = format!("{}\n", GroupMetrics::CSV_HEADER);
    for (name, m) in [("val", &val), ("test_in", &test_in), ("test_ood", &test_ood)] {
        groups.push_str(&m.csv_row(name));
        groups.push('\n');
    }
    write("group_metrics.csv", groups.as_bytes())?;
    model.save(dir.join("checkpoint.bin"))?;
    let v = split_weights(model, &splits.train, cfg.weighting)?.v;

    let selected_epoch = state.best.as_ref().map_or(0, |b| b.epoch);
    manifest.outputs =
        ["metrics.csv", "v_trajectory.csv", "group_metrics.csv", "checkpoint.bin"].map(String::from).to_vec();
    manifest.summary = serde_json::json!({
        "epochs_run": state.epoch,
        "selected_epoch": selected_epoch,
        "val_balanced_acc": val.balanced,
        "id_acc": test_in.micro,
        "ood_acc": test_ood.micro,
        "ood_worst_group": test_ood.worst_group,
        "train_split_v": v,
        "aborted": state.aborted,
    });
    manifest.finish(dir)?;
    Ok(RunResult {
        dir: dir.to_path_buf(),
        selected_epoch,
        val_balanced_acc: val.balanced,
        test_in,
        test_ood,
        aborted: state.aborted.clone(),
    })
}
