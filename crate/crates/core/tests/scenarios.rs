use std::path::PathBuf;

use csm_core::scenario::{
    builtin, builtin_names, builtin_source, load_scenario, parse_scenario, run_scenario, RunConfig, StepResult,
    ATTACK_SCENARIOS,
};

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

#[test]
fn shipped_files_match_the_registry() {
    for name in builtin_names() {
        let path = scenario_dir().join(format!("{name}.json"));
        let from_file = load_scenario(&path).unwrap();
        assert_eq!(from_file.name, name);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), builtin_source(name).unwrap());
    }
}

#[test]
fn attack_suite_is_clean() {
    for name in ATTACK_SCENARIOS {
        let r = run_scenario(&builtin(name).unwrap(), &RunConfig::default());
        assert_eq!(r.exit_code(), 0, "{name}: {:?}", r.mismatches);
        assert_eq!(r.violation_count, 0, "{name}");
        // Every attack has at least one step the system must refuse.
        assert!(r.trace.iter().any(|e| matches!(e.result, StepResult::Err(_))), "{name}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    for name in builtin_names() {
        let s = builtin(name).unwrap();
        let a = run_scenario(&s, &RunConfig::default()).to_jsonl();
        let b = run_scenario(&s, &RunConfig::default()).to_jsonl();
        assert_eq!(a, b, "{name}");
        assert_eq!(a.lines().count(), s.steps.len());
    }
}

#[test]
fn happy_path_consumer_sees_provider_bytes() {
    let r = run_scenario(&builtin("happy_path").unwrap(), &RunConfig::default());
    assert!(r.passed());
    let read = r
        .trace
        .iter()
        .find(|e| e.actor.to_string() == "realm:C" && e.op == "read")
        .unwrap();
    match &read.result {
        StepResult::Ok(v) => assert_eq!(v["text"], "hello from the provider"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn failing_expectation_is_reported_with_its_step() {
    let src = builtin_source("happy_path").unwrap().replace(r#""expect": { "err": "Fault" }"#, r#""expect": "ok""#);
    let r = run_scenario(&parse_scenario(&src).unwrap(), &RunConfig::default());
    assert_eq!(r.exit_code(), 1);
    assert_eq!(r.mismatches.len(), 1);
    assert_eq!(r.violation_count, 0);
}

#[test]
fn parse_errors_point_at_the_step_line() {
    let src = builtin_source("happy_path").unwrap().replace("\"csm_attach\"", "\"csm_glue\"");
    let line = src.lines().position(|l| l.contains("csm_glue")).unwrap() + 1;
    let e = parse_scenario(&src).unwrap_err();
    assert_eq!(e.line, Some(line));
    assert!(e.to_string().contains("csm_glue"), "{e}");
}

#[test]
fn missing_file_is_a_parse_error() {
    assert!(load_scenario(scenario_dir().join("no_such.json")).is_err());
}
