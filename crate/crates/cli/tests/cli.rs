use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn eld(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eld"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("eld runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = eld(args, cwd);
    assert!(
        out.status.success(),
        "eld {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_training() -> Vec<&'static str> {
    vec![
        "--epochs",
        "3",
        "--patience",
        "1",
        "--batch-size",
        "4",
        "--lr",
        "1e-3",
        "--jitter",
        "0",
        "--no-augment",
    ]
}

#[test]
fn synth_is_deterministic_and_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--n", "5", "--seed", "1", "--out", "a"], dir.path());
    ok(&["synth", "--n", "5", "--seed", "1", "--out", "b"], dir.path());
    let a = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/manifest.json")).unwrap();
    assert_eq!(a, b);
    let prov: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "synth");
    assert_eq!(prov["seed"], 1);
    assert_eq!(prov["config"]["command"]["Synth"]["n"], 5);
}

#[test]
fn split_of_2091_records() {
    let dir = tempfile::tempdir().unwrap();
    let lm: Vec<[f64; 2]> = (0..48).map(|i| [i as f64, 1.0]).collect();
    let samples: Vec<Value> = (0..2091)
        .map(|i| {
            serde_json::json!({
                "image": format!("img/{i}.png"),
                "width": 100, "height": 100,
                "bbox": [0.0, 0.0, 60.0, 60.0],
                "landmarks": lm,
            })
        })
        .collect();
    let m = serde_json::json!({ "schema": "catflw48", "samples": samples });
    std::fs::write(dir.path().join("all.json"), m.to_string()).unwrap();
    let out = ok(&["split", "--manifest", "all.json", "--seed", "3", "--out", "s"], dir.path());
    let sizes: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(sizes, serde_json::json!({ "train": 1569, "val": 314, "test": 208 }));
    let mut seen = std::collections::HashSet::new();
    for (name, n) in [("train", 1569), ("val", 314), ("test", 208)] {
        let part: Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(format!("s/{name}.json"))).unwrap()).unwrap();
        let samples = part["samples"].as_array().unwrap();
        assert_eq!(samples.len(), n);
        for s in samples {
            assert!(seen.insert(s["image"].as_str().unwrap().to_string()));
        }
    }
    assert!(dir.path().join("s/provenance.json").exists());
}

#[test]
fn missing_run_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--n", "1", "--out", "d"], dir.path());
    let out = eld(
        &["predict", "--image", "d/images/cat_00000.png", "--run", "no-such-run", "--out", "p.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-run"));

    let out = eld(
        &["--json", "predict", "--image", "d/images/cat_00000.png", "--run", "no-such-run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let line = String::from_utf8_lossy(&out.stderr);
    let err: Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(err["exit_code"], 2);
    assert_eq!(err["kind"], "usage");
    assert!(err["error"].as_str().unwrap().contains("no-such-run"));
}

#[test]
fn bad_flags_exit_2_and_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(eld(&["synth", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(eld(&[], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), "{\"schema\": \"catflw48\", \"samples\": [{}]}").unwrap();
    let out = eld(&["--json", "validate", "--manifest", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["kind"], "operational");
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.toml"),
        "[synth]\nn = 3\nseed = 9\nout = \"from-config\"\n",
    )
    .unwrap();
    ok(&["--config", "cfg.toml", "synth"], dir.path());
    let m: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("from-config/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 3);
    ok(&["--config", "cfg.toml", "synth", "--n", "2", "--out", "flags"], dir.path());
    let m: Value = serde_json::from_slice(&std::fs::read(dir.path().join("flags/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 2);
    let prov: Value = serde_json::from_slice(&std::fs::read(dir.path().join("flags/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 9);

    std::fs::write(dir.path().join("broken.toml"), "[synth\n").unwrap();
    assert_eq!(eld(&["--config", "broken.toml", "synth"], dir.path()).status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(&["--workers", "2", "synth", "--n", "12", "--seed", "4", "--out", "data"], cwd);
    ok(&["validate", "--manifest", "data/manifest.json"], cwd);
    ok(&["split", "--manifest", "data/manifest.json", "--seed", "0", "--out", "splits"], cwd);

    let mut args = vec!["train", "--manifest-dir", "splits", "--out", "run"];
    args.extend(tiny_training());
    let summary: Value = serde_json::from_str(&ok(&args, cwd)).unwrap();
    assert_eq!(summary["stages"].as_array().unwrap().len(), 7);
    for stage in ["face", "centers", "left_eye", "right_eye", "left_ear", "right_ear", "nose"] {
        assert!(cwd.join("run").join(stage).join("history.csv").exists(), "{stage}");
    }
    let prov: Value = serde_json::from_slice(&std::fs::read(cwd.join("run/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["inputs"].as_object().unwrap().len(), 2);

    let test: Value = serde_json::from_slice(&std::fs::read(cwd.join("splits/test.json")).unwrap()).unwrap();
    let image = PathBuf::from("splits").join(test["samples"][0]["image"].as_str().unwrap());
    let image = image.to_str().unwrap();
    ok(&["predict", "--image", image, "--run", "run", "--bbox", "10,10,200,200", "--out", "pred.json"], cwd);
    let pred: Value = serde_json::from_slice(&std::fs::read(cwd.join("pred.json")).unwrap()).unwrap();
    assert_eq!(pred["landmarks"].as_array().unwrap().len(), 48);
    assert!(cwd.join("pred.json.provenance.json").exists());

    let out = ok(
        &["evaluate", "--run", "run", "--manifest-dir", "splits", "--mode", "gt-bbox", "--report", "rep/report.json"],
        cwd,
    );
    let head: Value = serde_json::from_str(&out).unwrap();
    assert!(head["nme_percent"].as_f64().unwrap().is_finite());
    let report: Value = serde_json::from_slice(&std::fs::read(cwd.join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "gt-bbox");
    assert_eq!(report["n_samples"], 1);
    assert!(std::fs::read_to_string(cwd.join("rep/report.csv")).unwrap().starts_with("image,nme_percent,status"));

    let mut args = vec!["ablate", "regions", "--grid", "eyes=1/2", "--run", "run", "--manifest-dir", "splits", "--out", "abl", "--mode", "gt-bbox"];
    args.extend(tiny_training());
    let csv = ok(&args, cwd);
    assert!(csv.starts_with("axis,value,nme_percent,n_fail\neyes,1/2,"), "{csv}");

    let mut args = vec!["ablate", "datasize", "--sizes", "4,9", "--manifest-dir", "splits", "--out", "ds", "--mode", "gt-bbox"];
    args.extend(tiny_training());
    let csv = ok(&args, cwd);
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(cwd.join("ds/datasize.csv").exists());

    let out = eld(&["ablate", "datasize", "--sizes", "99", "--manifest-dir", "splits", "--out", "ds2"], cwd);
    assert_eq!(out.status.code(), Some(2));
}
