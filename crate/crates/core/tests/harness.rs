use std::fs;
use std::path::{Path, PathBuf};

use pacter_core::harness::{self, load_corpus, overhead_report, run_cases, score, unresolved_labels};
use pacter_core::instrument::{self, coverage_scan, BuildOptions};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

#[test]
fn score_counts_missing_and_extra() {
    let s = score("fp @f:%a level=0\nfp @f:%b level=1\n", "fp @f:%a level=0\nfp @g:%c level=0\n");
    assert_eq!((s.identified, s.labeled), (2, 2));
    assert_eq!(s.missing, ["fp @g:%c level=0"]);
    assert_eq!(s.extra, ["fp @f:%b level=1"]);
    assert!((s.precision - 0.5).abs() < 1e-12 && (s.recall - 0.5).abs() < 1e-12);
}

#[test]
fn labels_name_real_values() {
    for c in load_corpus(&corpus()).unwrap() {
        let m = c.module().unwrap();
        let labels = c.labels.clone().unwrap_or_default();
        assert!(unresolved_labels(&m, &labels).is_empty(), "{}: {:?}", c.name, unresolved_labels(&m, &labels));
    }
}

#[test]
fn nothing_to_protect_costs_nothing() {
    let c = load_corpus(&corpus()).unwrap().into_iter().find(|c| c.name == "arith_nofp").unwrap();
    let o = overhead_report(&c.module().unwrap(), 1).unwrap();
    assert_eq!(o.retired_on, o.retired_off);
    assert_eq!(o.ratio, 1.0);
}

#[test]
fn fp_cases_cost_more() {
    for c in load_corpus(&corpus()).unwrap().into_iter().filter(|c| c.name != "arith_nofp") {
        let o = overhead_report(&c.module().unwrap(), 1).unwrap();
        assert!(o.ratio > 1.0, "{}: {o:?}", c.name);
    }
}

#[test]
fn case_reports_are_clean_and_repeatable() {
    let a = run_cases(&corpus(), 1).unwrap();
    let b = run_cases(&corpus(), 1).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for c in &a {
        assert!(c.failures.is_empty(), "{}: {:?}", c.name, c.failures);
    }
}

#[test]
fn coverage_matches_expected_files() {
    for c in load_corpus(&corpus()).unwrap() {
        let p = instrument::build(&c.module().unwrap(), BuildOptions::default()).unwrap();
        let r = coverage_scan(&p);
        let e = c.expected.as_ref().unwrap().coverage.clone();
        assert_eq!((r.blr, r.blraa, r.retaa, r.ret), (e.blr, e.blraa, e.retaa, e.ret), "{}", c.name);
    }
}

#[test]
fn broken_case_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(corpus().join("fig4_async_arg.ir"), dir.path().join("fig4_async_arg.ir")).unwrap();
    fs::write(dir.path().join("fig4_async_arg.labels"), "fp @main:%ghost level=0\n").unwrap();
    fs::write(dir.path().join("bad.ir"), "func @main( {\n").unwrap();
    let cases = run_cases(dir.path(), 1).unwrap();
    assert_eq!(cases.len(), 2);
    assert!(cases.iter().all(|c| !c.failures.is_empty()));
}

#[test]
fn empty_corpus_report_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let r = harness::run_suite(dir.path(), 1).unwrap();
    assert!(r.cases.is_empty() && r.scenarios.is_empty() && r.failures.is_empty());
}
