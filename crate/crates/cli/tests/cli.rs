use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_dedupe");

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dedupe(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("DEDUPE_DATA_DIR", dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dedupe(dir, args);
    assert!(
        out.status.success(),
        "dedupe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

/// Writes the built-in config shrunk to a few hundred sessions.
fn small_config(dir: &Path) {
    let text = ok(dir, &["default-config"]).replace("num_sessions = 6250", "num_sessions = 300");
    assert!(text.contains("num_sessions = 300"));
    std::fs::write(dir.join("small.toml"), text).unwrap();
}

fn small_dataset(dir: &Path) {
    small_config(dir);
    ok(dir, &["gen", "--config", "small.toml", "--stripe-rows", "512", "--out", "raw.dpf"]);
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    small_config(dir.path());
    for name in ["a.dpf", "b.dpf"] {
        ok(dir.path(), &["gen", "--config", "small.toml", "--seed", "9", "--out", name]);
    }
    ok(dir.path(), &["gen", "--config", "small.toml", "--seed", "10", "--out", "c.dpf"]);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.dpf"), read("b.dpf"));
    assert_ne!(read("a.dpf"), read("c.dpf"));
}

#[test]
fn invalid_config_is_reported() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[session]\nnum_sessions = \"many\"\n").unwrap();
    let out = dedupe(dir.path(), &["gen", "--config", "bad.toml", "--out", "x.dpf"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[gen]"), "{stderr}");
    assert!(!dir.path().join("x.dpf").exists());
}

#[test]
fn cluster_is_idempotent_and_smaller() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let first = json(&ok(dir.path(), &["cluster", "raw.dpf", "--out", "c1.dpf", "--stripe-rows", "512"]));
    ok(dir.path(), &["cluster", "c1.dpf", "--out", "c2.dpf", "--stripe-rows", "512"]);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("c1.dpf"), read("c2.dpf"));
    assert!(read("c1.dpf").len() < read("raw.dpf").len());
    assert!(first.is_object());
}

#[test]
fn characterize_with_and_without_keys() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let bare = json(&ok(dir.path(), &["characterize", "raw.dpf"]));
    assert_eq!(bare["features"].as_array().unwrap().len(), 0);
    assert!(bare["byte_weighted"].is_null());
    assert!(bare["partition_histogram"]["records"].as_u64().unwrap() > 0);

    let full = json(&ok(
        dir.path(),
        &["characterize", "raw.dpf", "--all-keys", "--batch-size", "256", "--csv", "dup.csv"],
    ));
    let features = full["features"].as_array().unwrap();
    assert_eq!(features.len(), 6);
    assert!(!full["batch_histogram"].is_null());
    let csv = std::fs::read_to_string(dir.path().join("dup.csv")).unwrap();
    assert_eq!(csv.lines().count(), features.len() + 1);

    let out = dedupe(dir.path(), &["characterize", "raw.dpf", "--keys", "nope"]);
    assert!(!out.status.success());
}

#[test]
fn bench_reports_are_reproducible() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    ok(dir.path(), &["cluster", "raw.dpf", "--out", "clustered.dpf"]);
    let configs = configs_dir();
    let (spec, model) = (configs.join("loader.toml"), configs.join("model.toml"));
    let run = |out: &str| {
        ok(
            dir.path(),
            &[
                "bench",
                "clustered.dpf",
                "--spec",
                spec.to_str().unwrap(),
                "--model",
                model.to_str().unwrap(),
                "--batch-size",
                "256",
                "--ranks",
                "2",
                "--seed",
                "3",
                "--omit-timings",
                "--out",
                out,
            ],
        );
        std::fs::read_to_string(dir.path().join(out)).unwrap()
    };
    let (first, second) = (run("r1.json"), run("r2.json"));
    assert_eq!(first, second);

    let report = json(&first);
    let (base, dedup, derived) = (&report["baseline"], &report["dedup"], &report["derived"]);
    assert!(base["iterations"].as_u64().unwrap() > 0);
    assert!(base["timings"].is_null());
    assert_eq!(derived["scores_bit_identical"], Value::Bool(true));
    let counter = |r: &Value, k: &str| r["stats"][k].as_f64().unwrap();
    for (ratio, field) in [
        ("lookup_ratio", "lookup_count"),
        ("a2a_bytes_fwd_ratio", "a2a_bytes_fwd"),
        ("a2a_bytes_back_ratio", "a2a_bytes_back"),
        ("activation_ratio", "activation_elements"),
        ("pooling_mac_ratio", "pooling_mac_count"),
    ] {
        let expected = counter(dedup, field) / counter(base, field);
        assert_eq!(derived[ratio].as_f64().unwrap(), expected, "{ratio}");
        assert!(expected <= 1.0, "{ratio}");
    }
    let bytes_out = dedup["bytes_out"].as_f64().unwrap() / base["bytes_out"].as_f64().unwrap();
    assert_eq!(derived["bytes_out_ratio"].as_f64().unwrap(), bytes_out);
}

#[test]
fn plot_writes_data_files() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    ok(
        dir.path(),
        &["plot", "raw.dpf", "--keys", "user_liked_items,item_id", "--batch-size", "256", "--out", "plots"],
    );
    for name in ["sessions_partition.dat", "sessions_batch.dat", "dedupe_model.dat", "duplication.dat", "plots.gp"] {
        let text = std::fs::read_to_string(dir.path().join("plots").join(name)).unwrap();
        assert!(!text.is_empty(), "{name}");
    }
    let dup = std::fs::read_to_string(dir.path().join("plots/duplication.dat")).unwrap();
    assert_eq!(dup.lines().count(), 3);
}

#[test]
fn data_dir_flag_overrides_environment() {
    let (env_dir, flag_dir) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    small_config(flag_dir.path());
    let out = Command::new(BIN)
        .args(["--data-dir", flag_dir.path().to_str().unwrap()])
        .args(["gen", "--config", "small.toml", "--out", "x.dpf"])
        .env("DEDUPE_DATA_DIR", env_dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(flag_dir.path().join("x.dpf").exists());
    assert!(!env_dir.path().join("x.dpf").exists());
}
