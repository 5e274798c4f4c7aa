use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = r#"{"scenario": {"layouts": 2, "frames": 12}, "adapt": {"epochs": 2}}"#;

fn edaod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edaod")).args(args).current_dir(dir).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Temp dir holding `small.json` and a generated two-layout bundle `b`.
fn small_bundle() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    let out = edaod(dir.path(), &["simgen", "--config", "small.json", "--out", "b", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

fn hash_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let digest = Sha256::digest(fs::read(&p).unwrap()).to_vec();
            (p.file_name().unwrap().to_string_lossy().into_owned(), digest)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn simgen_writes_one_stream_per_layout() {
    let dir = small_bundle();
    let b = dir.path().join("b");
    for f in ["layout_0.dstream.jsonl", "layout_1.dstream.jsonl", "oracle.jsonl", "source_set.jsonl", "scenario.json", "source.model.json"] {
        assert!(b.join(f).is_file(), "{f} missing");
    }
    assert!(!b.join("layout_2.dstream.jsonl").exists());
}

#[test]
fn simgen_rejects_bad_config_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"scenario": {"frames": -5}}"#).unwrap();
    let out = edaod(dir.path(), &["simgen", "--config", "bad.json", "--out", "b"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("scenario.frames"), "{}", stderr(&out));
    fs::write(dir.path().join("zero.json"), r#"{"scenario": {"frames": 0}}"#).unwrap();
    let out = edaod(dir.path(), &["simgen", "--config", "zero.json", "--out", "b"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("frames"));
    let out = edaod(dir.path(), &["simgen", "--config", "missing.json", "--out", "b"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn cluster_outputs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let one = r#"{"scenario": {"layouts": 1, "frames": 20, "objects_per_layout": 1, "severity": [{}]}}"#;
    fs::write(p.join("one.json"), one).unwrap();
    assert_eq!(code(&edaod(p, &["simgen", "--config", "one.json", "--out", "b", "--seed", "1"])), 0);
    let out = edaod(p, &["cluster", "b/layout_0.dstream.jsonl", "--tau2", "0.85", "--out", "one.clusters.jsonl"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(p.join("one.clusters.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1, "noiseless single object gives one cluster");

    let out = edaod(p, &["cluster", "b/layout_0.dstream.jsonl", "--tau2", "1.0", "--tau1", "0.5"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("merges      0"));
    assert!(p.join("b/layout_0.clusters.jsonl").is_file());

    assert_eq!(code(&edaod(p, &["cluster", "nope.dstream.jsonl", "--tau2", "0.85"])), 1);
    fs::write(p.join("bad.dstream.jsonl"), "{\"type\":\"header\",\"C\":2}\nnot json\n").unwrap();
    assert_eq!(code(&edaod(p, &["cluster", "bad.dstream.jsonl", "--tau2", "0.85"])), 2);
    assert_eq!(code(&edaod(p, &["cluster", "b/layout_0.dstream.jsonl", "--tau2", "0.8,0.9"])), 2);
}

#[test]
fn adapt_outputs() {
    let dir = small_bundle();
    let p = dir.path();
    let before = hash_dir(&p.join("b"));

    let out = edaod(p, &["adapt", "b", "--config", "small.json", "--keep-singles", "--out", "m/fused.model.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut written: Vec<String> =
        fs::read_dir(p.join("m")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    written.sort();
    assert_eq!(
        written,
        ["fused.model.json", "fused.tau0.8.model.json", "fused.tau0.85.model.json", "fused.tau0.9.model.json"]
    );

    let out = edaod(p, &["adapt", "b", "--config", "small.json", "--tau2", "0.85", "--keep-singles", "--out", "s.model.json"]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(p.join("s.model.json")).unwrap(), fs::read(p.join("s.tau0.85.model.json")).unwrap());

    let out = edaod(p, &["adapt", "b", "--epochs", "0", "--out", "zero.model.json"]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(p.join("zero.model.json")).unwrap(), fs::read(p.join("b/source.model.json")).unwrap());

    assert_eq!(code(&edaod(p, &["adapt", "b", "--layout", "7"])), 2);
    assert_eq!(code(&edaod(p, &["adapt", "b", "--model", "missing.model.json"])), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_edaod"))
        .args(["adapt", "b", "--epochs", "0", "--out", "t.model.json"])
        .env("EDAOD_THREADS", "zero")
        .current_dir(p)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert_eq!(hash_dir(&p.join("b")), before, "inputs were modified");
}

#[test]
fn eval_outputs() {
    let dir = small_bundle();
    let p = dir.path();
    let out = edaod(p, &["eval", "b", "--oracle-predictions", "--protocol", "cl", "--out", "r/o.report.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(p.join("r/o.report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(csv.lines().next(), Some("layout,protocol,variant,map50"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",1")), "{csv}");

    let out = edaod(p, &["eval", "b", "--config", "small.json", "--protocol", "cl", "--out", "cl.report.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("cl.report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let count = |v: &str| rows.iter().filter(|r| r["variant"] == v).count();
    assert_eq!((count("adapted"), count("source_only")), (2, 2));

    assert_eq!(code(&edaod(p, &["eval", "b", "--model", "nope.model.json"])), 1);

    let one = r#"{"scenario": {"layouts": 1, "frames": 6}}"#;
    fs::write(p.join("one.json"), one).unwrap();
    assert_eq!(code(&edaod(p, &["simgen", "--config", "one.json", "--out", "single"])), 0);
    assert_eq!(code(&edaod(p, &["eval", "single", "--protocol", "next"])), 2);
    assert_eq!(code(&edaod(p, &["eval", "single", "--protocol", "cl"])), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = edaod(p, &["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(code(&edaod(p, &["gradcheck", "--corrupt-gradient", "--instances", "2"])), 3);
    assert_eq!(code(&edaod(p, &["gradcheck", "--dims", "8,1,5,1", "--instances", "5"])), 0);
    assert_eq!(code(&edaod(p, &["gradcheck", "--dims", "8,1,5"])), 2);
}
