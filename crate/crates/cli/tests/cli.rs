use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn snp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snp"))
        .args(args)
        .current_dir(dir)
        .env_remove("SNP_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = snp(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn setup(dir: &Path) {
    ok(dir, &["synth", "--preset", "tiny-desk", "--seed", "7", "--out", "m.snpm"]);
    ok(dir, &["calib", "--model", "m.snpm", "--count", "6", "--seed", "1", "--out", "c.snpc"]);
}

#[test]
fn zero_ratio_prune_validates_with_no_difference() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--out", "t.json"]);
    ok(d, &["prune", "--model", "m.snpm", "--importance", "t.json", "--plan", "p.json", "--out", "p.snpm"]);
    let v = ok(d, &["validate", "--original", "m.snpm", "--pruned", "p.snpm", "--plan", "p.json", "--calib", "c.snpc"]);
    assert_eq!(v["result"]["pass"], true);
    assert_eq!(v["result"]["max_logit_diff"], 0.0);
    assert_eq!(std::fs::read(d.join("m.snpm")).unwrap(), std::fs::read(d.join("p.snpm")).unwrap());
}

#[test]
fn half_query_pruning_pipeline_passes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let a = ok(d, &["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--out", "t.json"]);
    assert_eq!(a["manifest"]["params"]["images"], 6);
    assert_eq!(a["manifest"]["params"]["r"], 17);
    ok(d, &["prune", "--model", "m.snpm", "--importance", "t.json", "--qk", "0.5", "--plan", "p.json", "--out", "p.snpm"]);
    let v = ok(d, &["validate", "--original", "m.snpm", "--pruned", "p.snpm", "--plan", "p.json", "--calib", "c.snpc"]);
    assert_eq!(v["result"]["pass"], true);
    assert!(v["result"]["max_logit_diff"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn full_pipeline_with_heads_and_embed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--out", "t.json"]);
    std::fs::write(d.join("r.json"), r#"{"qk":0.5,"v":0.25,"ffn":0.5,"embed":0.25,"per_block":{"1":{"ffn":0.75}}}"#).unwrap();
    let p = ok(d, &["prune", "--model", "m.snpm", "--importance", "t.json", "--ratios", "r.json", "--heads", "0.5", "--plan", "p.json", "--out", "p.snpm"]);
    assert_eq!(p["result"]["ratios"]["blocks"][1]["ffn"], 0.75);
    let v = ok(d, &["validate", "--original", "m.snpm", "--pruned", "p.snpm", "--plan", "p.json", "--calib", "c.snpc"]);
    assert_eq!(v["result"]["pass"], true);
    let f = ok(d, &["flops", "--model", "p.snpm", "--original", "m.snpm"]);
    assert_eq!(f["result"]["ratios"]["embed"], 0.25);
}

#[test]
fn mismatched_model_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--out", "t.json"]);
    ok(d, &["prune", "--model", "m.snpm", "--importance", "t.json", "--ffn", "0.5", "--plan", "p.json", "--out", "p.snpm"]);
    let out = snp(d, &["validate", "--original", "m.snpm", "--pruned", "m.snpm", "--plan", "p.json", "--calib", "c.snpc"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["result"]["pass"], false);

    ok(d, &["synth", "--preset", "tiny-desk", "--seed", "8", "--out", "other.snpm"]);
    let out = snp(d, &["validate", "--original", "other.snpm", "--pruned", "p.snpm", "--plan", "p.json", "--calib", "c.snpc"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stale plan"));
}

#[test]
fn analysis_and_synthesis_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["synth", "--preset", "tiny-desk", "--seed", "7", "--out", "m2.snpm"]);
    assert_eq!(std::fs::read(d.join("m.snpm")).unwrap(), std::fs::read(d.join("m2.snpm")).unwrap());
    let first = snp(d, &["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--out", "t1.json"]);
    let again = snp(d, &["rerun", "--manifest", "t1.json.manifest.json"]);
    assert_eq!(first.stdout, again.stdout);
    let t1 = std::fs::read(d.join("t1.json")).unwrap();
    let threaded = Command::new(env!("CARGO_BIN_EXE_snp"))
        .args(["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--out", "t2.json"])
        .current_dir(d)
        .env("SNP_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(threaded.status.code(), Some(0));
    assert_eq!(t1, std::fs::read(d.join("t2.json")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    assert_eq!(snp(d, &["synth", "--preset", "huge", "--out", "x"]).status.code(), Some(4));
    assert_eq!(snp(d, &["synth", "--nope"]).status.code(), Some(4));
    assert_eq!(snp(d, &["flops", "--model", "missing.snpm"]).status.code(), Some(4));
    assert_eq!(snp(d, &["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--criterion", "taylor"]).status.code(), Some(4));
    assert_eq!(snp(d, &["analyze", "--model", "m.snpm", "--calib", "c.snpc", "--rank", "99"]).status.code(), Some(4));
    std::fs::write(d.join("bad.snpm"), b"not a model").unwrap();
    let out = snp(d, &["flops", "--model", "bad.snpm"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty() && !out.stderr.is_empty());
    let threads = Command::new(env!("CARGO_BIN_EXE_snp"))
        .args(["flops", "--model", "m.snpm"])
        .current_dir(d)
        .env("SNP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(4));
    assert_eq!(snp(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn flops_bench_and_attmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let f = ok(d, &["flops", "--model", "m.snpm"]);
    assert_eq!(f["result"]["params"], f["result"]["breakdown"].as_array().unwrap().iter().map(|e| e["params"].as_u64().unwrap()).sum::<u64>());
    let text = snp(d, &["flops", "--model", "m.snpm", "--format", "text"]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("total"));
    let b = ok(d, &["bench", "--model", "m.snpm", "--runs", "3", "--warmup", "1"]);
    assert_eq!(b["result"]["samples_ms"].as_array().unwrap().len(), 3);
    ok(d, &["attmap", "--model", "m.snpm", "--calib", "c.snpc", "--index", "2", "--out", "map"]);
    let pgm = std::fs::read(d.join("map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(std::fs::read_to_string(d.join("map.csv")).unwrap().lines().count(), 4);
    assert_eq!(snp(d, &["attmap", "--model", "m.snpm", "--calib", "c.snpc", "--index", "6", "--out", "x"]).status.code(), Some(4));
}
