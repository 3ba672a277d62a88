use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn vqcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqcal")).args(args).env_remove("VQCAL_CACHE_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vqcal(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small model with its 2-bit quantization.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let model = dir.join("m.vqt");
    let q = dir.join("q.vqq");
    ok(&["make-toy-model", "--out", s(&model), "--hidden", "32", "--heads", "2", "--tokens", "8", "--timesteps", "4"]);
    ok(&["quantize", "--model", s(&model), "--out", s(&q), "--bits", "2", "--kmeans-iters", "10"]);
    (model, q)
}

fn calibrate(model: &Path, q: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["calibrate", "--model", s(model), "--quantized", s(q), "--out", s(out)];
    args.extend_from_slice(&["--trajectories", "4", "--batch", "2"]);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn quantize_prints_the_storage_table() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.vqt");
    ok(&["make-toy-model", "--out", s(&model), "--hidden", "32", "--heads", "2", "--tokens", "8", "--timesteps", "4"]);
    for (bits, kd) in [("2", "256x4"), ("3", "64x2")] {
        let q = dir.path().join(format!("q{bits}.vqq"));
        let table = ok(&["quantize", "--model", s(&model), "--out", s(&q), "--bits", bits, "--kmeans-iters", "5"]);
        assert!(table.starts_with("layer"));
        let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("blocks.")).collect();
        assert_eq!(rows.len(), 16);
        assert!(rows.iter().all(|r| r.contains(kd)), "{table}");
        let again = dir.path().join("again.vqq");
        ok(&["quantize", "--model", s(&model), "--out", s(&again), "--bits", bits, "--kmeans-iters", "5"]);
        assert_eq!(std::fs::read(&q).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn report_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (model, q) = setup(dir.path());
    for n in ["1", "2"] {
        let out = dir.path().join(format!("c{n}.vqq"));
        calibrate(&model, &q, &out, &["--iters", "7", "--n", n]);
        let rep = dir.path().join(format!("rep{n}"));
        let log = dir.path().join(format!("c{n}.vqq.log.jsonl"));
        ok(&["report", "--log", s(&log), "--quantized", s(&out), "--out-dir", s(&rep)]);

        let curve = std::fs::read_to_string(rep.join("loss_curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 1 + 7);
        let pos: Value = serde_json::from_str(&std::fs::read_to_string(rep.join("positions.json")).unwrap()).unwrap();
        let props: Vec<f64> =
            pos["pooled"]["proportions"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(props.len(), n.parse::<usize>().unwrap());
        assert!((props.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        if n == "1" {
            assert_eq!(props, [1.0]);
        }
    }
}

#[test]
fn eval_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (model, q) = setup(dir.path());
    let c = dir.path().join("c.vqq");
    calibrate(&model, &q, &c, &["--iters", "3"]);
    let report = dir.path().join("eval.json");
    let fp_row = format!("fp={}", s(&model));
    ok(&[
        "eval",
        "--model",
        s(&model),
        "--row",
        &fp_row,
        "--row",
        s(&q),
        "--row",
        s(&c),
        "--uq-bits",
        "3",
        "--trajectories",
        "3",
        "--out",
        s(&report),
    ]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["uq3", "fp", "q", "c"]);
    let fp = &rows[1];
    assert_eq!(fp["mean_block_mse"].as_f64(), Some(0.0));
    assert_eq!(fp["final_latent_mse"].as_f64(), Some(0.0));
    assert!(fp["layers"].as_array().unwrap().iter().all(|l| l["weight_mse"].as_f64() == Some(0.0)));
    for r in &rows[2..] {
        assert!(r["layers"].as_array().unwrap().iter().all(|l| l["effective_bits"].as_f64() == Some(2.0)));
        assert!(r["mean_block_mse"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn mode_none_only_finalizes() {
    let dir = tempfile::tempdir().unwrap();
    let (model, q) = setup(dir.path());
    let out = dir.path().join("none.vqq");
    calibrate(&model, &q, &out, &["--mode", "none", "--iters", "2"]);
    assert_eq!(std::fs::read(&q).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (model, q) = setup(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "model = {:?}\nquantized = {:?}\n[calib]\niters = 9\nbatch = 2\n[cache]\ntrajectories = 3\n",
            s(&model),
            s(&q)
        ),
    )
    .unwrap();
    let out = dir.path().join("c.vqq");
    ok(&["--config", s(&cfg), "calibrate", "--out", s(&out), "--iters", "4"]);
    let log = std::fs::read_to_string(dir.path().join("c.vqq.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    std::fs::write(&cfg, "[calib]\nlearning_rate = 1\n").unwrap();
    assert_eq!(vqcal(&["--config", s(&cfg), "inspect", s(&q)]).status.code(), Some(2));
}

#[test]
fn trajectory_cache_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (model, q) = setup(dir.path());
    let cache = dir.path().join("cache");
    let run = |out: &str| {
        let out = dir.path().join(out);
        let st = Command::new(env!("CARGO_BIN_EXE_vqcal"))
            .args(["calibrate", "--model", s(&model), "--quantized", s(&q), "--out", s(&out)])
            .args(["--iters", "2", "--batch", "2", "--trajectories", "3"])
            .env("VQCAL_CACHE_DIR", &cache)
            .output()
            .unwrap();
        assert!(st.status.success());
        std::fs::read(out).unwrap()
    };
    let a = run("a.vqq");
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
    assert_eq!(run("b.vqq"), a);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (model, q) = setup(dir.path());
    let bad = dir.path().join("bad.vqq");

    let out = vqcal(&["quantize", "--model", s(&model), "--out", s(&bad), "--k", "8", "--d", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().filter(|l| l.starts_with("invalid plan:")).count(), 16);

    let missing = dir.path().join("missing.vqt");
    assert_eq!(vqcal(&["quantize", "--model", s(&missing), "--out", s(&bad)]).status.code(), Some(2));
    assert_eq!(
        vqcal(&["report", "--log", s(&missing), "--quantized", s(&q), "--out-dir", s(dir.path())]).status.code(),
        Some(2)
    );

    let other = dir.path().join("other.vqt");
    ok(&["make-toy-model", "--out", s(&other), "--hidden", "16", "--heads", "2", "--tokens", "8", "--timesteps", "4"]);
    assert_eq!(vqcal(&["eval", "--model", s(&other), "--row", s(&q), "--trajectories", "2"]).status.code(), Some(2));

    let nan = dir.path().join("nan.vqq");
    let out = vqcal(&[
        "calibrate",
        "--model",
        s(&model),
        "--quantized",
        s(&q),
        "--out",
        s(&nan),
        "--iters",
        "5",
        "--batch",
        "2",
        "--trajectories",
        "2",
        "--lr-codebook",
        "1e37",
        "--lr-ratio",
        "1e37",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("nan.vqq.diverged.json").exists());
    assert!(!nan.exists());
}

#[test]
fn inspect_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let (model, q) = setup(dir.path());
    assert!(ok(&["inspect", s(&q)]).contains("k=256 d=4"));
    assert!(ok(&["inspect", s(&model)]).starts_with("tensor container"));
    let json = dir.path().join("cos.json");
    ok(&[
        "diagnose",
        "--model",
        s(&model),
        "--quantized",
        s(&q),
        "--trajectories",
        "2",
        "--samples",
        "4",
        "--out",
        s(&json),
    ]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["histogram"].as_array().unwrap().len(), 20);
}
