use std::process::{Command, Output};

fn csmsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csmsim")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn scenario(path: &std::path::Path, expect_read: &str) {
    let src = format!(
        r#"{{
  "schema": 1,
  "name": "tiny",
  "steps": [
    {{ "actor": "host", "op": "launch_realm", "args": {{ "alias": "A" }} }},
    {{ "actor": "host", "op": "populate", "args": {{ "realm": "A", "base": "0x100000", "size": 1 }} }},
    {{ "actor": "realm:A", "op": "write", "args": {{ "ipa": "0x100000", "text": "hi" }} }},
    {{ "actor": "realm:A", "op": "read", "args": {{ "ipa": "0x100000", "len": 2 }}, "expect": {{ "ok": {{ "text": "{expect_read}" }} }} }}
  ]
}}"#
    );
    std::fs::write(path, src).unwrap();
}

#[test]
fn run_passes_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("s.json");
    let trace = dir.path().join("t.jsonl");
    scenario(&file, "hi");
    let o = csmsim(&["run", file.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    assert_eq!(std::fs::read_to_string(trace).unwrap().lines().count(), 4);
}

#[test]
fn failed_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("s.json");
    scenario(&file, "no");
    let o = csmsim(&["run", file.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step 3"));
}

#[test]
fn parse_error_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    std::fs::write(&file, "{\n  \"schema\": 1,\n  \"name\": \"x\",\n  \"steps\": [\n    { \"actor\": \"host\", \"op\": \"fly\" }\n  ]\n}\n").unwrap();
    let o = csmsim(&["run", file.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 5"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&csmsim(&[])), 2);
    assert_eq!(code(&csmsim(&["builtin", "no_such"])), 2);
    assert_eq!(code(&csmsim(&["run", "/nonexistent/x.json"])), 2);
    assert_eq!(code(&csmsim(&["bench", "--mode", "rot13", "--size", "64"])), 2);
    assert_eq!(code(&csmsim(&["bench", "--mode", "csm", "--size", "8"])), 2);
    assert_eq!(code(&csmsim(&["bench", "--mode", "csm", "--size", "64", "--iters", "10"])), 2);
}

#[test]
fn builtin_list_names_every_scenario() {
    let o = csmsim(&["builtin", "--list"]);
    assert_eq!(code(&o), 0);
    let names: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().map(str::to_owned).collect();
    let expected: Vec<String> = csm_core::scenario::builtin_names().map(str::to_owned).collect();
    assert_eq!(names, expected);
}

#[test]
fn seed_is_applied_and_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let t = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let o = csmsim(&["builtin", "happy_path", "--seed", seed, "--trace", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        std::fs::read(p).unwrap()
    };
    let a = t("a", "1");
    assert_eq!(a, t("b", "1"));
    assert_ne!(a, t("c", "2"));
}

#[test]
fn explore_prints_a_json_report() {
    let o = csmsim(&["explore", "--depth", "2"]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["complete"], true);
    assert_eq!(r["depth_reached"], 2);
    assert_eq!(r["config"]["realm_count"], 2);
}

#[test]
fn bench_appends_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    for mode in ["plaintext", "aead", "csm"] {
        let o = csmsim(&["bench", "--mode", mode, "--size", "128", "--iters", "1000", "--csv", csv.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,size_bytes,iters,median_latency_ns,throughput_Bps,cpu_ns_per_msg");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("csm,128,1000,"));
}
