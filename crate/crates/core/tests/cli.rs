use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flextender"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn run_to(dir: &Path, tag: &str, scenario: &Path, seed: &str) -> (Output, PathBuf, PathBuf) {
    let trace = dir.join(format!("{tag}.trace.jsonl"));
    let metrics = dir.join(format!("{tag}.metrics.json"));
    let out = bin()
        .args(["run", "--scenario"])
        .arg(scenario)
        .args(["--seed", seed, "--trace"])
        .arg(&trace)
        .arg("--metrics")
        .arg(&metrics)
        .output()
        .unwrap();
    (out, trace, metrics)
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, ta, ma) = run_to(dir.path(), "a", &scenario("fig5"), "9");
    let (b, tb, mb) = run_to(dir.path(), "b", &scenario("fig5"), "9");
    assert!(a.status.success() && b.status.success());
    assert_eq!(std::fs::read(ta).unwrap(), std::fs::read(tb).unwrap());
    assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn recorded_trace_audits_clean() {
    let dir = tempfile::tempdir().unwrap();
    let (_, trace, _) = run_to(dir.path(), "t", &scenario("fig4"), "1");
    let out = bin().args(["audit", "--trace"]).arg(&trace).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("agreement: PASS"));
}

#[test]
fn invalid_policy_exits_nonzero_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"cluster": {"n": 4, "f": 1},
"policies": [{"target": "a0", "policy": {"node": "n9"}}],
"workload": {"conflict_free": {"tx_count": 4, "batch": 2}},
"target_heights": 1}"#,
    )
    .unwrap();
    let (out, trace, metrics) = run_to(dir.path(), "bad", &bad, "0");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n9"));
    assert!(!trace.exists() && !metrics.exists());

    std::fs::write(&bad, "{\"cluster\": {\"n\": 4,\n \"f\": 1},\n \"bogus\": 1}").unwrap();
    let (out, _, _) = run_to(dir.path(), "bad", &bad, "0");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exhausted_time_is_a_liveness_failure() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.json");
    std::fs::write(
        &short,
        r#"{"cluster": {"n": 4, "f": 1}, "sim": {"max_sim_time": 50},
"workload": {"conflict_free": {"tx_count": 4, "batch": 2}}, "target_heights": 2}"#,
    )
    .unwrap();
    let (out, _, _) = run_to(dir.path(), "short", &short, "0");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_trace_exits_with_invariant_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corrupt.jsonl");
    std::fs::write(&path, "not json\n").unwrap();
    let out = bin().args(["audit", "--trace"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TRACE_CORRUPT"));
}

#[test]
fn compare_prints_ratio() {
    let out = bin().args(["compare", "--scenario"]).arg(scenario("all_conflict")).args(["--seeds", "2"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("throughput ratio"), "{text}");
    assert!(text.contains("eov: runs=2"), "{text}");
}
