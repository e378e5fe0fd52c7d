use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn pacter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacter")).args(args).env_remove("PACTER_SEED").output().expect("spawn pacter")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json stdout")
}

fn build(ir: &str, dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let obj = dir.join(name);
    let ir = corpus().join(ir);
    let mut args = vec!["build", ir.to_str().unwrap(), "-o", obj.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = pacter(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    obj
}

#[test]
fn build_then_run_reports_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let obj = build("fig7_load_branch.ir", dir.path(), "f7.obj", &[]);
    let out = pacter(&["--json", "run", obj.to_str().unwrap()]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["outputs"]["out"], 42);
    assert_eq!(v["retired"], 68);
    assert_eq!(v["trap"]["kind"], "Halt");
}

#[test]
fn no_pa_build_runs_fewer_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let obj = build("fig7_load_branch.ir", dir.path(), "f7.obj", &["--no-pa"]);
    let v = json(&pacter(&["--json", "run", obj.to_str().unwrap()]));
    assert_eq!(v["retired"], 39);
}

#[test]
fn trace_is_line_delimited_json() {
    let dir = tempfile::tempdir().unwrap();
    let obj = build("fpcmp.ir", dir.path(), "a.obj", &[]);
    let trace = dir.path().join("t.jsonl");
    let out = pacter(&["run", obj.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(&trace).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let e: Value = serde_json::from_str(line).unwrap();
        for k in ["retired", "event", "pc", "detail"] {
            assert!(e.get(k).is_some(), "missing {k} in {line}");
        }
    }
}

#[test]
fn fuel_exhaustion_is_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let obj = build("fig7_load_branch.ir", dir.path(), "f7.obj", &[]);
    let out = pacter(&["--json", "run", obj.to_str().unwrap(), "--fuel", "5"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["fuel_exhausted"], true);
}

#[test]
fn seed_env_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let obj = build("fpcmp.ir", dir.path(), "a.obj", &[]);
    let out = Command::new(env!("CARGO_BIN_EXE_pacter"))
        .args(["--json", "run", obj.to_str().unwrap()])
        .env("PACTER_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(json(&out)["seed"], 9);
    let out = pacter(&["--json", "--seed", "4", "run", obj.to_str().unwrap()]);
    assert_eq!(json(&out)["seed"], 4);
}

#[test]
fn dump_fpset_matches_labels() {
    let ir = corpus().join("fig9_union.ir");
    let out = pacter(&["analyze", ir.to_str().unwrap(), "--dump-fpset"]);
    assert!(out.status.success());
    let labels = fs::read_to_string(corpus().join("fig9_union.labels")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), labels);
}

#[test]
fn analyze_json_lists_members() {
    let ir = corpus().join("fig4_async_arg.ir");
    let v = json(&pacter(&["--json", "analyze", ir.to_str().unwrap()]));
    let members = v["members"].as_array().unwrap();
    assert!(!members.is_empty());
    let mut sorted = members.clone();
    sorted.sort_by_key(|m| m.as_str().unwrap().to_string());
    assert_eq!(&sorted, members);
}

fn attack(scenario: &str, obj_ir: &str, extra: &[&str]) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let name = Path::new(obj_ir).with_extension("obj");
    build(obj_ir, dir.path(), name.to_str().unwrap(), extra);
    let sc = dir.path().join("s.json");
    fs::copy(corpus().join("scenarios").join(scenario), &sc).unwrap();
    let out = pacter(&["--json", "attack", sc.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    json(&out)
}

#[test]
fn attack_substitution_is_blocked() {
    let v = attack("fp_substitution.json", "attack_ops.ir", &[]);
    assert_eq!(v["outcome"], "BLOCKED");
}

#[test]
fn attack_toctou_depends_on_return_form() {
    assert_eq!(attack("toctou.json", "fig8_toctou.ir", &[])["outcome"], "BLOCKED");
    assert_eq!(attack("toctou.json", "fig8_toctou.ir", &["--legacy-ret"])["outcome"], "HIJACKED");
}

#[test]
fn attack_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("bad.json");
    fs::write(&sc, r#"{"name":"x","obj":"x.obj","schedule":[],"target":{"word":0},"bogus":1}"#).unwrap();
    let out = pacter(&["attack", sc.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_corpus_gives_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = pacter(&["--json", "suite", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["cases"].as_array().unwrap().len(), 0);
    assert_eq!(v["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn broken_case_fails_suite() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(corpus().join("fpcmp.ir"), dir.path().join("fpcmp.ir")).unwrap();
    fs::write(dir.path().join("fpcmp.labels"), "fp @main:%nothing level=0\n").unwrap();
    let report = dir.path().join("r.json");
    let out = pacter(&["suite", dir.path().to_str().unwrap(), "-o", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["failures"].as_array().unwrap().iter().any(|f| f.as_str().unwrap().starts_with("fpcmp")));
    let again = pacter(&["report", report.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stdout).contains("FAIL"));
}
