use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multiresnet::model::{build_network, save_checkpoint, BlockKind, NetworkConfig};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multiresnet"))
        .env("MULTIRESNET_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "train",
            "--depth",
            "8",
            "--k",
            "2",
            "--dataset",
            "synth",
            "--epochs",
            "2",
            "--seed",
            "1",
        ],
    );
    for f in ["checkpoint.bin", "train_log.csv", "steps.csv", "manifest.txt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    for key in [
        "subcommand = train",
        "seed = 1",
        "config.depth = 8",
        "artifact.checkpoint",
        "version",
        "wall_time",
    ] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }
}

#[test]
fn invalid_depth_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--depth", "9", "--block", "basic"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("depth 9") && err.contains("6n+2"), "{err}");
    assert!(!dir.path().join("manifest.txt").exists());
}

#[test]
fn missing_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--dataset", "cifar10"]);
    assert!(!o.status.success());
    let missing = dir.path().join("nowhere");
    let o = run(
        dir.path(),
        &["train", "--dataset", "cifar10", "--data-dir", missing.to_str().unwrap()],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn analyze_counts_paths() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["analyze", "--n", "3", "--k", "2"]);
    let csv = fs::read_to_string(dir.path().join("distribution.csv")).unwrap();
    assert_eq!(column(&csv, "count"), ["1", "6", "12", "8"]);
    ok(dir.path(), &["analyze", "--n", "3", "--k", "1"]);
    let csv = fs::read_to_string(dir.path().join("distribution.csv")).unwrap();
    assert_eq!(column(&csv, "count"), ["1", "3", "3", "1"]);
    let o = run(dir.path(), &["analyze", "--n", "3", "--p", "1.5"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("outside (0, 1)"));
}

#[test]
fn ideal_simulation_has_no_transfer() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "simulate",
            "--depth",
            "110",
            "--k",
            "2",
            "--batch",
            "32",
            "--latency",
            "0",
            "--bandwidth",
            "inf",
        ],
    );
    let csv = fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert_eq!(column(&csv, "transfer"), ["0"]);
}

#[test]
fn calibrate_on_bundled_times() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["calibrate"]);
    let model = fs::read_to_string(dir.path().join("cost_model.txt")).unwrap();
    assert!(model.contains("t_fn = "));
    let res = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    assert_eq!(res.lines().count(), 7);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("result.rms_ms"));

    // the written model feeds the speedup table
    let table = dir.path().join("table");
    let cost = dir.path().join("cost_model.txt");
    ok(&table, &["speedup-table", "--cost", cost.to_str().unwrap()]);
    let md = fs::read_to_string(table.join("speedup.md")).unwrap();
    assert_eq!(md.lines().count(), 8);
}

#[test]
fn lesion_of_untrained_checkpoint_has_zero_control_delta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig::from_depth(8, 2, 1, BlockKind::Basic)
        .unwrap()
        .with_classes(2)
        .with_input([3, 8, 8]);
    let ckpt = dir.path().join("untrained.bin");
    save_checkpoint(&ckpt, &build_network(&cfg, 3).unwrap(), &[]).unwrap();
    let out = dir.path().join("lesion");
    ok(
        &out,
        &[
            "lesion",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--samples",
            "400",
            "--test-samples",
            "100",
        ],
    );
    let csv = fs::read_to_string(out.join("lesion.csv")).unwrap();
    let blocks = column(&csv, "block");
    let deltas = column(&csv, "delta");
    assert_eq!(blocks[0], "none");
    assert_eq!(deltas[0].parse::<f64>().unwrap(), 0.0);
    assert_eq!(blocks.len(), 1 + 1);
}

#[test]
fn toy_path_gradient_halves_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "path-gradient",
            "--max-depth",
            "4",
            "--samples",
            "200",
            "--test-samples",
            "50",
        ],
    );
    let csv = fs::read_to_string(dir.path().join("path_gradient.csv")).unwrap();
    for (d, rel) in column(&csv, "relative").iter().enumerate() {
        let rel: f64 = rel.parse().unwrap();
        assert!((rel / 0.5f64.powi(d as i32) - 1.0).abs() < 0.1, "d={d}: {rel}");
    }
}

#[test]
fn manifest_replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(
        &a,
        &[
            "train",
            "--depth",
            "8",
            "--k",
            "2",
            "--samples",
            "600",
            "--test-samples",
            "100",
            "--epochs",
            "1",
            "--seed",
            "4",
        ],
    );
    let manifest = a.join("manifest.txt");
    ok(&b, &["train", "--config", manifest.to_str().unwrap()]);
    for f in ["checkpoint.bin", "train_log.csv", "steps.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let o = run(&b, &["analyze", "--config", manifest.to_str().unwrap()]);
    assert!(!o.status.success());
}
