use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sitar::datasets::{load_mnist, majority_only_split, ColorMnistConfig, RawDigits, SplitKind, Splits};
use sitar::networks::Model;
use sitar::tensor::Tensor;
use sitar::theory::{run_case, CaseOptions, CaseReport, TheoremCase, Verdict};
use sitar::train::{split_weights, ExperimentConfig};
use sitar::traversal::{channel_energy, color_control, dominant, offsets, strip_ppm, traverse as traverse_dim};

use crate::manifest::RunManifest;
use crate::run::{execute, load_splits, resolve_config, RunResult};
use crate::{BuildDatasetArgs, Outcome, SweepArgs, TrainArgs, TraverseArgs, VerifyArgs};

/// Bad flag values detected after parsing; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn truncate(mut raw: RawDigits, n: usize) -> RawDigits {
    let n = n.min(raw.labels.len());
    raw.labels.truncate(n);
    raw.pixels.truncate(n * raw.height * raw.width);
    raw
}

pub fn build_dataset(a: &BuildDatasetArgs) -> Result<Outcome> {
    let cfg = ColorMnistConfig { p_d: a.p_d, p_c_in: a.p_c_in, p_c_out: a.p_c_out, seed: a.seed };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(usage("--val-fraction must lie in [0, 1)"));
    }
    if a.n == 0 || a.n_test == 0 {
        return Err(usage("--n and --n-test must be positive"));
    }
    let mut manifest = RunManifest::start("build-dataset", a.seed, serde_json::json!({
        "source": if a.synthetic { "synthetic".to_string() } else { a.mnist_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default() },
        "n": a.n,
        "n_test": a.n_test,
        "p_d": a.p_d,
        "p_c_in": a.p_c_in,
        "p_c_out": a.p_c_out,
        "val_fraction": a.val_fraction,
        "majority_only": a.majority_only,
    }))?;
    let mut splits = match &a.mnist_dir {
        Some(dir) => {
            let train = truncate(load_mnist(dir, true)?, a.n);
            let test = truncate(load_mnist(dir, false)?, a.n_test);
            Splits::build(&train, &test, &cfg, a.val_fraction)?
        }
        None => Splits::synthetic(a.n, a.n_test, &cfg, a.val_fraction)?,
    };
    if a.majority_only {
        splits.train = majority_only_split(&splits.train)?;
        splits.val = majority_only_split(&splits.val)?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    splits.save_dir(&a.out)?;
    fs::write(a.out.join("stats.csv"), splits.stats_csv())?;
    print!("{}", splits.stats_csv());
    manifest.outputs = SplitKind::ALL.iter().map(|&k| Splits::file_name(k)).collect();
    manifest.outputs.push("stats.csv".into());
    manifest.summary = serde_json::json!(SplitKind::ALL
        .iter()
        .map(|&k| (k.name(), splits.get(k).len()))
        .collect::<std::collections::BTreeMap<_, _>>());
    manifest.finish(&a.out)?;
    Ok(Outcome::Success)
}

fn report_run(r: &RunResult) {
    println!("run directory      {}", r.dir.display());
    println!("selected epoch     {}", r.selected_epoch);
    println!("val balanced acc   {:.4}", r.val_balanced_acc);
    println!("id acc             {:.4}", r.test_in.micro);
    println!("ood acc            {:.4}", r.test_ood.micro);
    println!("ood worst group    {:.4}", r.test_ood.worst_group);
    if let Some(why) = &r.aborted {
        println!("aborted            {why}");
    }
}

pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let cfg = resolve_config(&a.flags, a.data.as_deref())?;
    let splits = load_splits(&cfg)?;
    let result = execute(&cfg, &splits, &a.out.join(&a.name), "train", false)?;
    report_run(&result);
    Ok(if result.aborted.is_some() { Outcome::Failure } else { Outcome::Success })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Beta,
    Lambda,
    Targeting,
}

impl Axis {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => Self::Alpha,
            "beta" => Self::Beta,
            "lambda" | "lambda_cons" => Self::Lambda,
            "targeting" => Self::Targeting,
            other => return Err(usage(format!("unknown sweep axis {other:?}; expected alpha, beta, lambda or targeting"))),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Lambda => "lambda",
            Self::Targeting => "targeting",
        }
    }

    /// Applies one grid value to a base configuration.
    fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let num = || value.parse::<f64>().map_err(|_| usage(format!("bad {} value {value:?}", self.name())));
        match self {
            Self::Alpha => cfg.alpha = num()?,
            Self::Beta => cfg.beta = num()?,
            Self::Lambda => cfg.lambda_cons = num()?,
            Self::Targeting => {
                cfg.isotropic = match value {
                    "anisotropic" => false,
                    "isotropic" => true,
                    _ => return Err(usage(format!("targeting values are anisotropic or isotropic, got {value:?}"))),
                }
            }
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect()
}

#[derive(Debug)]
struct SweepRow {
    value: String,
    seed: u64,
    result: std::result::Result<RunResult, String>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn sweep(a: &SweepArgs) -> Result<Outcome> {
    let axis = Axis::parse(&a.axis)?;
    let values = split_list(&a.values);
    if values.is_empty() {
        return Err(usage("--values is empty"));
    }
    let seeds = split_list(&a.seeds)
        .iter()
        .map(|s| s.parse::<u64>().map_err(|_| usage(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    let base = resolve_config(&a.flags, a.data.as_deref())?;
    let mut points = Vec::new();
    for v in &values {
        for &s in &seeds {
            let mut cfg = axis.apply(&base, v)?;
            cfg.seed = s;
            points.push((v.clone(), s, cfg));
        }
    }
    let splits = load_splits(&base)?;
    let root = a.out.join(&a.name);
    fs::create_dir_all(&root)?;
    let mut manifest = RunManifest::start("sweep", base.seed, serde_json::json!({
        "axis": axis.name(),
        "values": values,
        "seeds": seeds,
        "base": base,
    }))?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build()?;
    let rows: Vec<SweepRow> = pool.install(|| {
        points
            .par_iter()
            .map(|(value, seed, cfg)| {
                let dir = root.join(format!("{}_{value}", axis.name())).join(format!("seed_{seed}"));
                let result = execute(cfg, &splits, &dir, "sweep", true).map_err(|e| format!("{e:#}"));
                match &result {
                    Ok(r) => eprintln!("{}={value} seed={seed}: ood {:.4}", axis.name(), r.test_ood.micro),
                    Err(e) => eprintln!("{}={value} seed={seed}: failed: {e}", axis.name()),
                }
                SweepRow { value: value.clone(), seed: *seed, result }
            })
            .collect()
    });

    let mut detail = String::from("axis,value,seed,status,selected_epoch,val_balanced_acc,id_acc,ood_acc,worst_group,error\n");
    for r in &rows {
        match &r.result {
            Ok(x) => detail.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},\n",
                axis.name(),
                r.value,
                r.seed,
                if x.aborted.is_some() { "aborted" } else { "ok" },
                x.selected_epoch,
                x.val_balanced_acc,
                x.test_in.micro,
                x.test_ood.micro,
                x.test_ood.worst_group
            )),
            Err(e) => detail.push_str(&format!(
                "{},{},{},failed,,,,,,\"{}\"\n",
                axis.name(),
                r.value,
                r.seed,
                e.replace('"', "'").replace('\n', " ")
            )),
        }
    }
    fs::write(root.join("sweep.csv"), &detail)?;

    let mut summary = String::from("value,runs,id_acc,ood_acc,ood_acc_std,worst_group\n");
    println!("{:>12} {:>5} {:>8} {:>8} {:>8} {:>8}", axis.name(), "runs", "id", "ood", "ood_sd", "worst");
    for v in &values {
        let ok: Vec<&RunResult> = rows.iter().filter(|r| &r.value == v).filter_map(|r| r.result.as_ref().ok()).collect();
        let pick = |f: fn(&RunResult) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let (id, ood, worst) = (pick(|r| r.test_in.micro), pick(|r| r.test_ood.micro), pick(|r| r.test_ood.worst_group));
        summary.push_str(&format!("{v},{},{},{},{},{}\n", ok.len(), mean(&id), mean(&ood), std_dev(&ood), mean(&worst)));
        println!("{v:>12} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", ok.len(), mean(&id), mean(&ood), std_dev(&ood), mean(&worst));
    }
    fs::write(root.join("summary.csv"), &summary)?;

    let failures = rows.iter().filter(|r| r.result.is_err()).count();
    manifest.outputs = vec!["sweep.csv".into(), "summary.csv".into()];
    for r in &rows {
        if let Ok(x) = &r.result {
            if let Ok(rel) = x.dir.strip_prefix(&root) {
                manifest.outputs.push(rel.join("manifest.json").display().to_string());
            }
        }
    }
    manifest.summary = serde_json::json!({ "runs": rows.len(), "failures": failures });
    manifest.finish(&root)?;
    Ok(if failures > 0 { Outcome::Failure } else { Outcome::Success })
}

fn split_kind(name: &str) -> Result<SplitKind> {
    SplitKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| usage(format!("unknown split {name:?}; expected train, val, test_in or test_ood")))
}

pub fn traverse(a: &TraverseArgs) -> Result<Outcome> {
    let checkpoint: PathBuf = match (&a.checkpoint, &a.run) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) => r.join("checkpoint.bin"),
        (None, None) => return Err(usage("pass --run or --checkpoint")),
    };
    if !checkpoint.exists() {
        bail!("checkpoint {} not found", checkpoint.display());
    }
    let out = match (&a.out, &a.run) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.join("traversals"),
        (None, None) => checkpoint.parent().unwrap_or(Path::new(".")).join("traversals"),
    };
    if a.steps == 0 || !(a.range >= 0.0) {
        return Err(usage("--steps must be positive and --range non-negative"));
    }
    let kind = split_kind(&a.split)?;
    let model = Model::<f64>::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let splits = Splits::load_dir(&a.data).with_context(|| format!("loading dataset from {}", a.data.display()))?;
    let data = splits.get(kind);
    if a.index >= data.len() {
        return Err(usage(format!("--index {} out of range for {} examples", a.index, data.len())));
    }
    fs::create_dir_all(&out)?;
    let mut manifest = RunManifest::start("traverse", 0, serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "data": a.data.display().to_string(),
        "split": a.split,
        "index": a.index,
        "range": a.range,
        "steps": a.steps,
        "probes": a.probes,
    }))?;

    let m = model.arch.latent_dim;
    let channels = model.arch.image.channels;
    let (mu, _) = model.encode_values(&data.batch::<f64>(&[a.index]))?;
    let v = split_weights(&model, &splits.train, Default::default())?.v;
    let offs = offsets(a.range, a.steps);
    let mut energy = String::from("dim,step,offset,energy_r,energy_g,energy_b,dominant\n");
    for j in 0..m {
        let frames: Tensor<f64> = traverse_dim(&model, mu.row(0), j, a.range, a.steps)?;
        let name = format!("dim_{:02}.ppm", j + 1);
        fs::write(out.join(&name), strip_ppm(&frames)?)?;
        manifest.outputs.push(name);
        for (s, o) in offs.iter().enumerate() {
            let e = channel_energy(frames.row(s), channels);
            let cells: Vec<String> = (0..3).map(|c| e.get(c).map_or(String::from("0"), |x| x.to_string())).collect();
            energy.push_str(&format!("{},{s},{o},{},{}\n", j + 1, cells.join(","), dominant(&e)));
        }
    }
    fs::write(out.join("channel_energy.csv"), &energy)?;

    let mut vcsv = String::from("dim,v,flip_rate,invariant_rate,joint_rate\n");
    let argmax = (0..m).fold(0, |b, j| if v[j] > v[b] { j } else { b });
    let probes = a.probes.min(data.len());
    let mut top = None;
    for j in 0..m {
        if probes > 0 && a.steps >= 2 {
            let cc = color_control(&model, data, j, a.range, a.steps, probes)?;
            vcsv.push_str(&format!("{},{},{},{},{}\n", j + 1, v[j], cc.flip_rate, cc.invariant_rate, cc.joint_rate));
            if j == argmax {
                top = Some(cc);
            }
        } else {
            vcsv.push_str(&format!("{},{},,,\n", j + 1, v[j]));
        }
    }
    fs::write(out.join("v.csv"), &vcsv)?;
    manifest.outputs.push("channel_energy.csv".into());
    manifest.outputs.push("v.csv".into());

    println!("strips written to  {}", out.display());
    println!("top shortcut dim   {} (v = {:.4})", argmax + 1, v[argmax]);
    if let Some(cc) = top {
        println!("colour flips       {:.3} of {} probes", cc.flip_rate, cc.probes);
        println!("prediction fixed   {:.3}", cc.invariant_rate);
        println!("both               {:.3}", cc.joint_rate);
    }
    manifest.summary = serde_json::json!({ "top_dim": argmax + 1, "v": v, "top_control": top.map(|c| serde_json::json!({
        "flip_rate": c.flip_rate, "invariant_rate": c.invariant_rate, "joint_rate": c.joint_rate, "probes": c.probes,
    })) });
    manifest.finish(&out)?;
    Ok(Outcome::Success)
}

fn print_report(r: &CaseReport) {
    println!("case {:?}", r.case);
    if let Some(s) = &r.scaling {
        println!(
            "  {:>8} {:>14} {:>11} {:>14} {:>12} {:>14}",
            "alpha", "mc_lhs", "std_err", "penalty_rhs", "residual", "resid_complete"
        );
        for row in &s.rows {
            println!(
                "  {:>8} {:>14.6e} {:>11.3e} {:>14.6e} {:>12.4e} {:>14.4e}",
                row.alpha, row.lhs, row.std_err, row.rhs, row.residual, row.residual_complete
            );
        }
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        println!("  fitted slope {}   complete-expansion slope {}", fmt(s.slope), fmt(s.slope_complete));
    }
    for c in &r.checks {
        println!(
            "  {:<34} value {:>12.6e}  expected {:>12.6e}  {}{}",
            c.name,
            c.value,
            c.expected,
            if c.pass { "pass" } else { "FAIL" },
            if c.required { "" } else { " (informational)" }
        );
    }
    println!("  verdict {:?}", r.verdict);
}

pub fn verify_theorem(a: &VerifyArgs) -> Result<Outcome> {
    let cases: Vec<TheoremCase> = if a.case == "all" {
        vec![TheoremCase::Linear, TheoremCase::TanhMlp, TheoremCase::Cubic]
    } else {
        vec![a.case.parse().map_err(|e: sitar::Error| usage(e.to_string()))?]
    };
    if a.samples < 2 {
        return Err(usage("--samples must be at least 2"));
    }
    let opts = CaseOptions { seed: a.seed, n_samples: a.samples, ..CaseOptions::default() };
    let mut csv = String::from("case,alpha,mc_lhs,std_err,penalty_rhs,residual,rhs_complete,residual_complete\n");
    let mut verdicts = Vec::new();
    for case in cases {
        let report = run_case(case, &opts)?;
        print_report(&report);
        if let Some(s) = &report.scaling {
            let name = serde_json::to_value(case)?.as_str().unwrap_or_default().to_string();
            for r in &s.rows {
                csv.push_str(&format!(
                    "{name},{},{},{},{},{},{},{}\n",
                    r.alpha, r.lhs, r.std_err, r.rhs, r.residual, r.rhs_complete, r.residual_complete
                ));
            }
        }
        verdicts.push(report.verdict);
    }
    if let Some(path) = &a.csv {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if verdicts.contains(&Verdict::Fail) {
        Outcome::Failure
    } else if verdicts.contains(&Verdict::Inconclusive) {
        Outcome::Inconclusive
    } else {
        Outcome::Success
    })
}
