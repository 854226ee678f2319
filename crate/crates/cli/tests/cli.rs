use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use recency_lab::seqmodel::{save_checkpoint, ModelConfig, ModelParams};

const TINY: &str = "\
# a model small enough to train in well under a second
model.embed_dim = 4
model.hidden_dim = 6
model.head_dim1 = 6
model.head_dim2 = 6
simulator.num_clusters = 4
simulator.items_per_cluster = 5
train.steps = 3
train.batch_size = 8
train.sequence_length = 12
train.eval_every = none
eval.size = 20
jacobian.ks = 1,2,5
jacobian.sequences = 10
bias_curve.ks = 1-11
sweep.max_expected = 1
sweep.repeats = 2
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recency-lab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.conf");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn manifest(dir: &Path, command: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, &format!("{command}_manifest.json"))).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().parse().unwrap())
        .collect()
}

fn zero_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("zero.ckpt");
    save_checkpoint(&path, &ModelParams::zeros(ModelConfig::default()).unwrap()).unwrap();
    path
}

#[test]
fn simulate_writes_the_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["simulate", "--count", "7", "--length", "9", "--seed", "3"],
    );
    let csv = read(dir.path(), "trajectories.csv");
    assert_eq!(csv.lines().count(), 1 + 63);
    assert!(csv.ends_with('\n'));
    let m = manifest(dir.path(), "simulate");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["seed"], "3");
    assert_eq!(m["outputs"][0]["file"], "trajectories.csv");
}

#[test]
fn simulate_with_zero_count_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--count", "0"]);
    assert_eq!(
        read(dir.path(), "trajectories.csv"),
        "sequence_id,position,item_id,cluster_id\n"
    );
}

#[test]
fn default_simulation_has_one_hundred_thousand_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate"]);
    assert_eq!(
        read(dir.path(), "trajectories.csv").lines().count(),
        100_001
    );
}

#[test]
fn seeds_change_simulations() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["simulate", "--count", "5", "--seed", "1"]);
    ok(b.path(), &["simulate", "--count", "5", "--seed", "2"]);
    assert_ne!(
        read(a.path(), "trajectories.csv"),
        read(b.path(), "trajectories.csv")
    );
}

#[test]
fn train_writes_checkpoint_and_one_log_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let conf = conf.to_str().unwrap();
    ok(dir.path(), &["train", "--config", conf]);
    assert_eq!(read(dir.path(), "train_log.csv").lines().count(), 1 + 3);
    let m = manifest(dir.path(), "train");
    let files: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["file"].as_str().unwrap())
        .collect();
    assert_eq!(files, ["model.ckpt", "train_log.csv"]);

    ok(
        dir.path(),
        &["train", "--config", conf, "--set", "train.steps=1"],
    );
    assert_eq!(read(dir.path(), "train_log.csv").lines().count(), 2);
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let out = ok(
        dir.path(),
        &[
            "config",
            "--config",
            conf.to_str().unwrap(),
            "--set",
            "train.steps=9",
            "--seed",
            "5",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\ntrain.steps = 9\n"));
    assert!(text.contains("\nmodel.hidden_dim = 6\n"));
    assert!(text.contains("\nseed = 5\n"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--set", "train.stepz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepz"));
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "train.steps = 1\nmodel.hidden = 4\n").unwrap();
    let out = run(dir.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["train", "--set", "simulator.p_same=1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let out = run(
        dir.path(),
        &[
            "train",
            "--config",
            conf.to_str().unwrap(),
            "--set",
            "optimizer.learning_rate=1e300",
            "--set",
            "train.clip_norm=none",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let m = manifest(dir.path(), "train");
    assert_eq!(m["status"], "failed");
    assert_eq!(m["exit_code"], 3);
    assert!(m["error"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn unwritable_output_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = run(&blocker.join("sub"), &["simulate", "--count", "1"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn zero_model_evaluates_to_uniform_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path());
    ok(
        dir.path(),
        &["eval", "--checkpoint", ckpt.to_str().unwrap()],
    );
    let metrics = read(dir.path(), "metrics.csv");
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("baseline,0,0,"));
    assert!((column(&metrics, "entropy")[0] - 100f64.ln()).abs() < 1e-6);
    assert!(column(&metrics, "kl")[0].abs() < 1e-6);
    let heat = read(dir.path(), "heatmap.csv");
    assert_eq!(heat.lines().count(), 1 + 10);
    let first: Vec<&str> = heat.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first.len(), 2 + 100);
    assert_eq!(
        manifest(dir.path(), "eval")["inputs"][0]["file"],
        ckpt.to_str().unwrap()
    );
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = run(
        dir.path(),
        &["eval", "--checkpoint", ckpt.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}

#[test]
fn checkpoint_must_match_the_simulator() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path());
    let conf = tiny_config(dir.path());
    let out = run(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            conf.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn uniform_model_has_flat_bias_curve() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path());
    ok(
        dir.path(),
        &[
            "bias-curve",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--ks",
            "1-99",
        ],
    );
    let csv = read(dir.path(), "bias_curve.csv");
    let d = column(&csv, "d_k");
    assert_eq!(d.len(), 99);
    assert!(d.iter().all(|v| (v - 0.1).abs() < 1e-9));
    assert!(csv.lines().nth(1).unwrap().ends_with(",zero"));

    let out = run(
        dir.path(),
        &[
            "bias-curve",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--ks",
            "100",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn jacobian_single_lag_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let conf = conf.to_str().unwrap();
    ok(dir.path(), &["train", "--config", conf]);
    let ckpt = dir.path().join("model.ckpt");
    ok(
        dir.path(),
        &[
            "jacobian",
            "--config",
            conf,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--ks",
            "1",
        ],
    );
    let csv = read(dir.path(), "spectrum.csv");
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,"));

    ok(
        dir.path(),
        &[
            "jacobian",
            "--config",
            conf,
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    let m = column(&read(dir.path(), "spectrum.csv"), "mean_modulus");
    assert_eq!(m.len(), 3);
    assert!(m.iter().all(|v| v.is_finite() && *v > 0.0));

    let out = run(
        dir.path(),
        &[
            "jacobian",
            "--config",
            conf,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--ks",
            "12",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_rows_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    ok(dir.path(), &["sweep", "--config", conf.to_str().unwrap()]);
    let csv = read(dir.path(), "sweep.csv");
    // baseline, fixed 1, random 1: two runs and one aggregate each
    assert_eq!(csv.lines().count(), 1 + 9);
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let map10 = column(&csv, "map10");
    for cell in 0..3 {
        let agg = &rows[3 * cell + 2];
        assert_eq!(agg[2], "aggregate");
        let mean = (map10[3 * cell] + map10[3 * cell + 1]) / 2.0;
        assert!((map10[3 * cell + 2] - mean).abs() < 1e-12);
    }
    let m = manifest(dir.path(), "sweep");
    assert!(m["seeds"]["repeat_1"].is_u64());
}

#[test]
fn single_cell_sweep_has_ten_rows_and_one_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    ok(
        dir.path(),
        &[
            "sweep",
            "--config",
            conf.to_str().unwrap(),
            "--set",
            "sweep.max_expected=0",
            "--set",
            "sweep.repeats=10",
        ],
    );
    let csv = read(dir.path(), "sweep.csv");
    assert_eq!(csv.lines().count(), 1 + 11);
    assert_eq!(csv.lines().filter(|l| l.contains(",aggregate,")).count(), 1);
}

#[test]
fn failed_sweep_runs_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let out = run(
        dir.path(),
        &[
            "sweep",
            "--config",
            conf.to_str().unwrap(),
            "--set",
            "optimizer.learning_rate=1e300",
            "--set",
            "train.clip_norm=none",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let m = manifest(dir.path(), "sweep");
    // a run whose ReLUs all die can survive the blow-up, so count rather than assume
    let failed = m["details"].as_array().unwrap().len();
    assert!(failed > 0);
    let seeds = read(dir.path(), "sweep.csv")
        .lines()
        .skip(1)
        .filter(|l| !l.contains(",aggregate,"))
        .count();
    assert_eq!(failed + seeds, 6);
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let conf = tiny_config(a.path());
    let conf = conf.to_str().unwrap();
    ok(a.path(), &["train", "--config", conf, "--threads", "1"]);
    ok(b.path(), &["train", "--config", conf, "--threads", "3"]);
    let sums = |d: &Path| manifest(d, "train")["outputs"].clone();
    assert_eq!(sums(a.path()), sums(b.path()));
}
