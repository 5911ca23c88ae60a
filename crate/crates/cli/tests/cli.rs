//! End-to-end runs of the `einspace` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_einspace"));
    c.env_remove("EINSPACE_OUT_DIR").env_remove("EINSPACE_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden(name: &str) -> Value {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata/cli").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Structural equality with a relative tolerance on floats.
fn close(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0),
            _ => x == y,
        },
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| close(p, q)),
        (Value::Object(x), Value::Object(y)) => x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| close(v, w))),
        _ => a == b,
    }
}

fn assert_golden(args: &[&str], name: &str) {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    let got: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(close(&got, &golden(name)), "{args:?} differs from {name}:\n{}", stdout(&o));
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walk(dir);
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.flat_map(|e| {
                let p = e.unwrap().path();
                if p.is_dir() {
                    let mut v = walk(&p);
                    v.push(p);
                    v
                } else {
                    vec![p]
                }
            })
            .collect()
        })
        .unwrap_or_default()
}

#[test]
fn json_outputs_match_goldens() {
    assert_golden(&["analyze", "--p", "0.32", "--json"], "analyze-p032.json");
    assert_golden(&["count", "--dyck", "--max-len", "12", "--json"], "count-dyck.json");
    assert_golden(&["seeds", "show", "conv-block-skip", "--json"], "seeds-show-conv-block-skip.json");
    assert_golden(&["sample", "--seed", "42", "--task", "im-patterns", "--json"], "sample-seed42.json");
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["analyze", "--p", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&["seeds", "show", "no-such-seed"]).status.code(), Some(1));
    assert_eq!(run(&["sample", "--input", "im:3,16"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "/definitely/missing.json"]).status.code(), Some(1));
    assert_eq!(run(&["analyze"]).status.code(), Some(0));
}

#[test]
fn usage_errors_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.toml");
    std::fs::write(&bad, "config_version = 1\nstrategy = \"random-search\"\niterations = \"many\"\n").unwrap();
    let o = run(&["search", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iterations"));
    let o = run(&["stats", "--n", "5", "--input", "oops", "--out-dir", d.join("st").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["sample", "--variant", "3d", "--out", d.join("t.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(files_in(d), vec![bad]);
}

#[test]
fn sample_mutate_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.json");
    let m = dir.path().join("m.json");
    assert!(run(&["sample", "--seed", "3", "--task", "im-patterns", "--out", t.to_str().unwrap()]).status.success());
    let o = run(&["mutate", t.to_str().unwrap(), "--seed", "1", "--out", m.to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_ne!(v["parent"]["hash"], v["child"]["hash"]);
    let o = run(&["eval", m.to_str().unwrap(), "--evaluator", "validity", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["fitness"], 1.0);
}

#[test]
fn stats_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["stats", "--n", "200", "--seed", "5", "--input", "im:3,16,16", "--out-dir", d.to_str().unwrap(), "--plot"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["stats.csv", "histogram.csv", "histogram.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let table = std::fs::read_to_string(a.join("stats.csv")).unwrap();
    let mean_leaves: f64 = table.lines().find(|l| l.starts_with("terminals,")).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let hist = std::fs::read_to_string(a.join("histogram.csv")).unwrap();
    let total: u64 = hist.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert!((total as f64 - 200.0 * mean_leaves).abs() < 1e-6);
}

#[test]
fn search_stops_resumes_and_matches_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("re.toml");
    std::fs::write(
        &cfg,
        "config_version = 1\nstrategy = \"regularized-evolution\"\niterations = 12\npopulation_size = 4\ntournament_size = 2\ncheckpoint_every = 2\nseed = 9\n\n[evaluator]\nkind = \"param-surrogate\"\n",
    )
    .unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let c = cfg.to_str().unwrap();
    assert!(run(&["search", c, "--out-dir", full.to_str().unwrap()]).status.success());
    let o = run(&["search", c, "--out-dir", split.to_str().unwrap(), "--stop-after", "5", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["completed"], false);
    // a second fresh start into the same directory is refused
    assert_eq!(run(&["search", c, "--out-dir", split.to_str().unwrap()]).status.code(), Some(1));
    assert!(run(&["search", c, "--out-dir", split.to_str().unwrap(), "--resume"]).status.success());
    for f in ["history.jsonl", "summary.csv", "best.json", "report.json"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(split.join(f)).unwrap(), "{f}");
    }
    let summary = std::fs::read_to_string(full.join("summary.csv")).unwrap();
    let best: Vec<f64> = summary.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(!best.is_empty());
    assert!(best.windows(2).all(|w| w[0] <= w[1]), "{best:?}");
}

#[test]
fn out_dir_defaults_next_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, "config_version = 1\nstrategy = \"random-search\"\niterations = 3\n\n[evaluator]\nkind = \"validity\"\n").unwrap();
    assert!(run(&["search", cfg.to_str().unwrap()]).status.success());
    assert!(dir.path().join("runs/tiny/history.jsonl").exists());
    let env_dir = dir.path().join("from-env");
    let o = bin().args(["search", cfg.to_str().unwrap()]).env("EINSPACE_OUT_DIR", &env_dir).output().unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("report.json").exists());
}
