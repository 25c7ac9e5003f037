//! End-to-end runs of the `sitar` binary on tiny synthetic data.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sitar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sitar")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn build(dir: &Path, seed: &str) {
    let out = sitar(&["build-dataset", "--synthetic", "--n", "256", "--n-test", "64", "--seed", seed, "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

const TINY: [&str; 10] = ["--latent-dim", "4", "--hidden", "16", "--conv-channels", "4,8", "--batch-size", "32", "--epochs", "1"];

#[test]
fn help_version_and_usage_errors() {
    assert_eq!(code(&sitar(&["--help"])), 0);
    assert_eq!(code(&sitar(&["--version"])), 0);
    assert_eq!(code(&sitar(&["train", "--help"])), 0);
    assert_eq!(code(&sitar(&[])), 1);
    assert_eq!(code(&sitar(&["frobnicate"])), 1);
    assert_eq!(code(&sitar(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&sitar(&["build-dataset", "--out", "/tmp/x"])), 1);
    assert_eq!(code(&sitar(&["verify-theorem", "--case", "quartic"])), 1);
    assert_eq!(code(&sitar(&["build-dataset", "--synthetic", "--out", "/tmp/x", "--p-d", "1.5"])), 1);
}

#[test]
fn build_dataset_writes_reproducible_containers() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    build(&a, "7");
    build(&b, "7");
    for f in ["train.bin", "val.bin", "test_in.bin", "test_ood.bin", "stats.csv"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs between identical invocations");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["p_c_in"], 0.1);
    assert_eq!(manifest["config"]["p_c_out"], 0.9);
    assert_eq!(manifest["config"]["p_d"], 0.25);
    for f in manifest["outputs"].as_array().unwrap() {
        assert!(a.join(f.as_str().unwrap()).exists());
    }
    let stats = fs::read_to_string(a.join("stats.csv")).unwrap();
    assert!(stats.starts_with("split,n,"));
    assert_eq!(stats.lines().count(), 5);
}

#[test]
fn majority_only_keeps_correlated_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let out = sitar(&["build-dataset", "--synthetic", "--n", "300", "--n-test", "40", "--majority-only", "--out", d.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let train = sitar::datasets::GroupedDataset::load(d.join("train.bin")).unwrap();
    assert!((0..train.len()).all(|i| train.y[i] == train.c[i]));
}

#[test]
fn train_writes_run_directory_and_honours_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build(&data, "3");
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "# file values\nalpha = 0.5\nbeta = 3\nseed = 11\n").unwrap();
    let runs = tmp.path().join("runs");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", runs.to_str().unwrap(), "--name", "r"];
    args.extend(["--config", cfg.to_str().unwrap(), "--alpha", "0.25"]);
    args.extend(TINY);
    let out = sitar(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = runs.join("r");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["alpha"], 0.25, "flag beats file");
    assert_eq!(manifest["config"]["beta"], 3.0, "file beats default");
    assert_eq!(manifest["config"]["lambda_cons"], 10.0, "default kept");
    assert_eq!(manifest["seed"], 11);
    for f in manifest["outputs"].as_array().unwrap() {
        assert!(dir.join(f.as_str().unwrap()).exists());
    }
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    assert_eq!(
        header,
        ["epoch", "recon", "kl", "robust_ce", "consistency", "total", "val_balanced_acc", "id_acc", "ood_acc", "worst_group"]
    );
    let last: Vec<&str> = metrics.lines().last().unwrap().split(',').collect();
    let ood: f64 = last[8].parse().unwrap();
    assert!((0.0..=1.0).contains(&ood));
    assert!(fs::read_to_string(dir.join("v_trajectory.csv")).unwrap().starts_with("epoch,v1,v2,v3,v4\n"));
    let model = sitar::Model::load(dir.join("checkpoint.bin")).unwrap();
    assert_eq!(model.arch.latent_dim, 4);
}

#[test]
fn single_point_sweep_equals_train() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build(&data, "5");
    let d = data.to_str().unwrap();
    let root = tmp.path().to_str().unwrap().to_string();
    let mut train = vec!["train", "--data", d, "--out", &root, "--name", "t", "--beta", "0.5", "--seed", "2"];
    train.extend(TINY);
    assert_eq!(code(&sitar(&train)), 0);
    let mut sweep = vec!["sweep", "--data", d, "--out", &root, "--name", "s", "--axis", "beta", "--values", "0.5", "--seeds", "2"];
    sweep.extend(TINY);
    let out = sitar(&sweep);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let point = tmp.path().join("s").join("beta_0.5").join("seed_2");
    for f in ["metrics.csv", "v_trajectory.csv", "group_metrics.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(tmp.path().join("t").join(f)).unwrap(), fs::read(point.join(f)).unwrap(), "{f}");
    }
    let summary = fs::read_to_string(tmp.path().join("s").join("summary.csv")).unwrap();
    assert!(summary.starts_with("value,runs,id_acc,ood_acc"));
    assert!(summary.lines().nth(1).unwrap().starts_with("0.5,1,"));
    let detail = fs::read_to_string(tmp.path().join("s").join("sweep.csv")).unwrap();
    assert_eq!(detail.lines().count(), 2);
}

#[test]
fn sweep_rejects_unknown_axis_and_values() {
    let base = ["sweep", "--data", "/nonexistent", "--values", "1"];
    assert_eq!(code(&sitar(&[&base[..], &["--axis", "gamma"]].concat())), 1);
    assert_eq!(code(&sitar(&["sweep", "--data", "/nonexistent", "--axis", "targeting", "--values", "sideways"])), 1);
}

#[test]
fn sweep_records_failures_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build(&data, "4");
    let root = tmp.path().to_str().unwrap();
    // the second seed's directory is blocked by a plain file
    let blocked = tmp.path().join("s").join("alpha_1");
    fs::create_dir_all(&blocked).unwrap();
    fs::write(blocked.join("seed_1"), "not a directory").unwrap();
    let mut args = vec!["sweep", "--data", data.to_str().unwrap(), "--out", root, "--name", "s", "--axis", "alpha"];
    args.extend(["--values", "1", "--seeds", "0,1"]);
    args.extend(TINY);
    let out = sitar(&args);
    assert_eq!(code(&out), 2);
    let detail = fs::read_to_string(tmp.path().join("s").join("sweep.csv")).unwrap();
    assert!(detail.contains(",0,ok,"));
    assert!(detail.contains(",1,failed,"));
    assert!(fs::read_to_string(tmp.path().join("s").join("summary.csv")).unwrap().contains("\n1,1,"));
}

#[test]
fn traverse_writes_one_strip_per_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build(&data, "6");
    let root = tmp.path().to_str().unwrap();
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", root, "--name", "r"];
    args.extend(TINY);
    assert_eq!(code(&sitar(&args)), 0);
    let run = tmp.path().join("r");
    let out = sitar(&["traverse", "--run", run.to_str().unwrap(), "--data", data.to_str().unwrap(), "--probes", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trav = run.join("traversals");
    let strips: Vec<_> = fs::read_dir(&trav).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "ppm")).collect();
    assert_eq!(strips.len(), 4);
    assert!(trav.join("v.csv").exists() && trav.join("channel_energy.csv").exists());
    let ppm = fs::read(trav.join("dim_01.ppm")).unwrap();
    let header = b"P6\n196 28\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    assert_eq!(ppm.len(), header.len() + 196 * 28 * 3);
    assert_eq!(fs::read_to_string(trav.join("v.csv")).unwrap().lines().count(), 5);

    // zero range: every frame equals the reconstruction of mu
    let flat = tmp.path().join("flat");
    let out = sitar(&["traverse", "--run", run.to_str().unwrap(), "--data", data.to_str().unwrap(), "--range", "0", "--out", flat.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let ppm = fs::read(flat.join("dim_02.ppm")).unwrap();
    let body = &ppm[header.len()..];
    for row in body.chunks(196 * 3) {
        let first = &row[..28 * 3];
        assert!(row.chunks(28 * 3).all(|frame| frame == first));
    }
    assert_eq!(code(&sitar(&["traverse", "--run", tmp.path().join("missing").to_str().unwrap(), "--data", data.to_str().unwrap()])), 2);
}

#[test]
fn verify_theorem_cubic_and_linear_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("t.csv");
    let out = sitar(&["verify-theorem", "--case", "cubic"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = sitar(&["verify-theorem", "--case", "linear", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("case,alpha,mc_lhs"));
    assert_eq!(text.lines().count(), 5);
}
