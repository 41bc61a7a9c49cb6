use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn prepsignal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prepsignal"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn scenario(dir: &Path) {
    std::fs::write(
        dir.join("scenario.toml"),
        "seed = 3\nn_cbgs = 6\nagents_per_cbg = 8\n\n[defaults]\nmultiplier = 2.0\nevac_fraction = 0.4\nbase_evac_fraction = 0.2\n",
    )
    .unwrap();
    let out = prepsignal(dir, &["synth", "--config", "scenario.toml", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn stages_compose_to_all() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scenario(dir);
    assert!(prepsignal(dir, &["all", "--config", "data/pipeline.toml", "--out", "full"]).status.success());
    for stage in ["homes", "visits", "metrics", "evac", "classify", "correlate"] {
        let out = prepsignal(dir, &["--config", "data/pipeline.toml", "--out", "staged", stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let full = read_dir(&dir.join("full"));
    let staged = read_dir(&dir.join("staged"));
    let mut compared = 0;
    for (name, bytes) in &full {
        if name.starts_with("manifest_") {
            continue;
        }
        assert_eq!(staged.get(name), Some(bytes), "{name} differs");
        compared += 1;
    }
    assert_eq!(compared, 10);
    for stage in ["homes", "visits", "metrics", "evac", "classify", "correlate"] {
        assert!(staged.contains_key(&format!("manifest_{stage}.json")));
    }
}

#[test]
fn manifest_records_digests_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scenario(dir);
    assert!(prepsignal(dir, &["all", "--config", "data/pipeline.toml", "--out", "out"]).status.success());
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("out/manifest_all.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "all");
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["inputs"]["pings.csv"]["sha256"].is_string());
    assert_eq!(m["counts"]["devices"], 48);
    assert_eq!(m["outputs"]["homes.csv"]["rows"], 48);
    let metrics = std::fs::read(dir.join("out/metrics.csv")).unwrap();
    let digest = m["outputs"]["metrics.csv"]["sha256"].as_str().unwrap();
    assert_eq!(digest, prepsignal::manifest::sha256_hex(&metrics));
}

#[test]
fn missing_income_skips_stratification() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scenario(dir);
    std::fs::remove_file(dir.join("data/income.csv")).unwrap();
    let out = prepsignal(dir, &["all", "--config", "data/pipeline.toml", "--out", "out"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("income"));
    assert!(dir.join("out/quadrants.geojson").exists());
    assert!(!dir.join("out/income_strata.csv").exists());
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("out/manifest_all.json")).unwrap()).unwrap();
    assert!(m["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("income")));
}

#[test]
fn invalid_windows_exit_1_before_processing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("bad.toml"),
        "[paths]\npings = \"nope.csv\"\n\n[windows]\nbaseline_start = \"2017-08-21\"\nbaseline_end = \"2017-08-30\"\n",
    )
    .unwrap();
    let out = prepsignal(dir, &["all", "--config", "bad.toml", "--out", "out"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("baseline"));
    assert!(!dir.join("out").exists());
}

#[test]
fn malformed_input_exit_1_and_lenient_recovers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scenario(dir);
    let pings = dir.join("data/pings.csv");
    let mut text = std::fs::read_to_string(&pings).unwrap();
    text.push_str("dev-x,2017-08-02T00:00:00Z,95.0,-95.5\n");
    std::fs::write(&pings, text).unwrap();
    let out = prepsignal(dir, &["homes", "--config", "data/pipeline.toml", "--out", "out"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pings.csv:"));
    let out = prepsignal(dir, &["homes", "--config", "data/pipeline.toml", "--out", "out", "--lenient"]);
    assert!(out.status.success());
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("out/manifest_homes.json")).unwrap()).unwrap();
    assert_eq!(m["counts"]["pings_skipped_malformed"], 1);
}

#[test]
fn runtime_failure_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scenario(dir);
    // The pings path names a directory, which cannot be read as a file.
    std::fs::remove_file(dir.join("data/pings.csv")).unwrap();
    std::fs::create_dir(dir.join("data/pings.csv")).unwrap();
    let out = prepsignal(dir, &["homes", "--config", "data/pipeline.toml", "--out", "out"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stage_without_prerequisite_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scenario(dir);
    let out = prepsignal(dir, &["metrics", "--config", "data/pipeline.toml", "--out", "empty"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("visits.csv"));
}

#[test]
fn seed_flag_changes_synth_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    scenario(dir);
    let out = prepsignal(dir, &["synth", "--config", "scenario.toml", "--out", "other", "--seed", "4"]);
    assert!(out.status.success());
    let a = std::fs::read(dir.join("data/pings.csv")).unwrap();
    let b = std::fs::read(dir.join("other/pings.csv")).unwrap();
    assert_ne!(a, b);
    assert_eq!(std::fs::read(dir.join("data/cbgs.geojson")).unwrap(), std::fs::read(dir.join("other/cbgs.geojson")).unwrap());
}
