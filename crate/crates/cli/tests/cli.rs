use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn octa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octa"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn octa")
}

fn ok(args: &[&str]) -> Output {
    let out = octa(args);
    assert!(
        out.status.success(),
        "octa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Small three-volume dataset shared by the tests that need one.
fn dataset(dir: &Path) -> PathBuf {
    let cfg = dir.join("phantom.json");
    fs::write(&cfg, r#"{"dims": [16, 32, 32], "n_trees": 5, "n_repeats": 3}"#).unwrap();
    let data = dir.join("data");
    ok(&["--seed", "9", "phantom", "--config", s(&cfg), "--out", s(&data), "--volumes", "3"]);
    data
}

#[test]
fn help_and_usage_errors() {
    let out = octa(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("quantify"));
    assert_eq!(octa(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(octa(&["masf", "--out", "x.f32"]).status.code(), Some(1));
    assert_eq!(octa(&["masf", "--in", "a", "--out", "b", "--window", "many"]).status.code(), Some(1));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = octa(&["masf", "--in", s(&dir.path().join("nope.f32")), "--out", s(&dir.path().join("o.f32"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn invalid_parameters_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let scan = data.join("vol_000/single_00.f32");
    let out = octa(&["masf", "--in", s(&scan), "--out", s(&dir.path().join("o.f32")), "--window", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"n_trees": 3, "colour": "red"}"#).unwrap();
    let out = octa(&["phantom", "--config", s(&bad), "--out", s(&dir.path().join("d2"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn masf_announces_defaults_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let scan = data.join("vol_000/single_00.f32");
    let out_path = dir.path().join("filtered.f32");
    let out = ok(&["masf", "--in", s(&scan), "--out", s(&out_path)]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("gamma=0.8 window=11"), "{log}");
    let raw = fs::read(&scan).unwrap();
    let filtered = fs::read(&out_path).unwrap();
    assert_eq!(raw.len(), filtered.len());
    assert_ne!(raw, filtered);
    assert!(out_path.with_extension("f32.json").exists());
}

#[test]
fn quantify_clean_phantom_reports_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let manifest = json(&data.join("manifest.json"));
    for vol in manifest["volumes"].as_array().unwrap() {
        let clean = data.join(vol["clean"].as_str().unwrap());
        let report = dir.path().join("q.json");
        ok(&["quantify", "--in", s(&clean), "--report", s(&report)]);
        let r = json(&report);
        assert_eq!(r["segment_count"], vol["segment_count"], "{}", vol["clean"]);
        assert!(r["segment_density_per_mm3"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn train_enhance_metrics_and_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d);
    let tcfg = d.join("train.json");
    fs::write(&tcfg, r#"{"total_iters": 12, "eval_every": 6}"#).unwrap();
    let ckpt = d.join("model.ckpt");
    ok(&["train", "--config", s(&tcfg), "--data", s(&data), "--out", s(&ckpt)]);
    let curve = fs::read_to_string(d.join("model.ckpt.curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("iter,train_l1,val_l1,val_psnr"));
    assert_eq!(curve.lines().count(), 4);

    let ckpt2 = d.join("model2.ckpt");
    ok(&["train", "--config", s(&tcfg), "--data", s(&data), "--out", s(&ckpt2)]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    let scan = data.join("vol_002/single_00.f32");
    let (e1, e8) = (d.join("e1.f32"), d.join("e8.f32"));
    ok(&["enhance", "--ckpt", s(&ckpt), "--in", s(&scan), "--out", s(&e1), "--workers", "1"]);
    ok(&["enhance", "--ckpt", s(&ckpt), "--in", s(&scan), "--out", s(&e8), "--workers", "8"]);
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e8).unwrap());

    let merged = data.join("vol_002/merged.f32");
    let (r2, r3) = (d.join("m2.json"), d.join("m3.json"));
    ok(&["metrics", "--a", s(&e1), "--b", s(&merged), "--report", s(&r2)]);
    ok(&["metrics", "--a", s(&e1), "--b", s(&merged), "--d3", "--report", s(&r3)]);
    let (m2, m3) = (json(&r2), json(&r3));
    assert_eq!(m2["volumetric"], false);
    assert_eq!(m3["volumetric"], true);
    for m in [&m2, &m3] {
        assert!(m["psnr"].as_f64().unwrap().is_finite());
        let ssim = m["ssim"].as_f64().unwrap();
        assert!(ssim > 0.0 && ssim <= 1.0);
        assert!(m["gmsd"].as_f64().unwrap() >= 0.0);
    }

    let map = d.join("spectrum.f32");
    ok(&["spectrum", "--ckpt", s(&ckpt), "--in", s(&scan), "--block", "0", "--channel", "1", "--out", s(&map)]);
    let header = json(&d.join("spectrum.f32.json"));
    assert_eq!(header["dims"], serde_json::json!([1, 32, 17]));
    let out = octa(&["spectrum", "--ckpt", s(&ckpt), "--in", s(&scan), "--block", "99", "--channel", "0", "--out", s(&map)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn phantom_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("p.json");
    fs::write(&cfg, r#"{"dims": [16, 32, 32], "n_trees": 4, "n_repeats": 2}"#).unwrap();
    let run = |name: &str, seed: &str| {
        let out = d.join(name);
        ok(&["--seed", seed, "phantom", "--config", s(&cfg), "--out", s(&out), "--volumes", "2"]);
        fs::read(out.join("manifest.json")).unwrap()
    };
    let (a, b, c) = (run("a", "5"), run("b", "5"), run("c", "6"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
