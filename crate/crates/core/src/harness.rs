//! Corpus management, suite orchestration and reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, AdversaryError, Expect, GuessStats, Outcome, SweepReport};
use crate::analysis::{self, AnalysisError};
use crate::codec::{self, classify, PointerClass, PointerWord};
use crate::instrument::{self, coverage_scan, BuildOptions, CoverageReport, InstrumentError, MachineProgram};
use crate::ir::{self, Annotation, IrError, Module};
use crate::isa::memmap::DATA_BASE;
use crate::machine::{self, MachineConfig, MachineError, MachineState, DEFAULT_FUEL};

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error("{0}: {1}")]
    Expected(String, serde_json::Error),
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

/// Coverage counts a case is expected to show on its PA build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCoverage {
    pub blr: usize,
    pub blraa: usize,
    pub retaa: usize,
    pub ret: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    pub outputs: BTreeMap<String, u64>,
    pub coverage: ExpectedCoverage,
}

#[derive(Debug, Clone)]
pub struct CorpusCase {
    pub name: String,
    pub ir_path: PathBuf,
    pub source: String,
    /// Ground-truth function pointer set in `--dump-fpset` format.
    pub labels: Option<String>,
    pub expected: Option<Expected>,
}

impl CorpusCase {
    pub fn module(&self) -> Result<Module, IrError> {
        ir::parse_module(&self.source)
    }
}

/// Every `*.ir` file of `dir` with its sibling `.labels` and
/// `.expected.json`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusCase>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    let mut irs: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "ir")).collect();
    irs.sort();
    irs.into_iter()
        .map(|ir_path| {
            let name = ir_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let source = read(&ir_path)?;
            let labels_path = ir_path.with_extension("labels");
            let labels = if labels_path.exists() { Some(read(&labels_path)?) } else { None };
            let exp_path = dir.join(format!("{name}.expected.json"));
            let expected = if exp_path.exists() {
                Some(serde_json::from_str(&read(&exp_path)?).map_err(|e| HarnessError::Expected(name.clone(), e))?)
            } else {
                None
            };
            Ok(CorpusCase { name, ir_path, source, labels, expected })
        })
        .collect()
}

fn set_lines(text: &str) -> BTreeSet<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with(';')).map(String::from).collect()
}

/// Label lines that do not name anything in `m`.
pub fn unresolved_labels(m: &Module, labels: &str) -> Vec<String> {
    let resolves = |line: &str| -> bool {
        let mut words = line.split_whitespace();
        match (words.next(), words.next()) {
            (Some("fp"), Some(v)) => match v.split_once(':') {
                Some((f, local)) => {
                    let local = local.trim_start_matches('%');
                    m.function(f.trim_start_matches('@')).is_some_and(|func| {
                        func.params.iter().any(|(p, _)| p == local)
                            || func.insts().any(|i| i.result.as_deref() == Some(local))
                    })
                }
                None => m.global(v.trim_start_matches('@')).is_some(),
            },
            (Some("fpfield"), Some(t)) => m.typedef(t).is_some(),
            _ => false,
        }
    };
    set_lines(labels).into_iter().filter(|l| !resolves(l)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FpScore {
    pub identified: usize,
    pub labeled: usize,
    pub precision: f64,
    pub recall: f64,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

pub fn score(identified: &str, labels: &str) -> FpScore {
    let got = set_lines(identified);
    let want = set_lines(labels);
    let hit = got.intersection(&want).count();
    let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    FpScore {
        identified: got.len(),
        labeled: want.len(),
        precision: ratio(hit, got.len()),
        recall: ratio(hit, want.len()),
        missing: want.difference(&got).cloned().collect(),
        extra: got.difference(&want).cloned().collect(),
    }
}

/// Retired instructions from the call into `main` to `halt`.
pub fn run_counted(p: &MachineProgram, seed: u64) -> Result<(MachineState, u64), MachineError> {
    let mut s = machine::boot(p, seed)?;
    let start = s.retired;
    s.run(DEFAULT_FUEL)?;
    let n = s.retired - start;
    Ok((s, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub retired_on: u64,
    pub retired_off: u64,
    pub ratio: f64,
    pub image_on: u64,
    pub image_off: u64,
    pub image_ratio: f64,
}

pub fn overhead_report(m: &Module, seed: u64) -> Result<Overhead, HarnessError> {
    let on = instrument::build(m, BuildOptions::default())?;
    let off = instrument::build(m, BuildOptions::no_pa())?;
    let (_, retired_on) = run_counted(&on, seed)?;
    let (_, retired_off) = run_counted(&off, seed)?;
    Ok(Overhead {
        retired_on,
        retired_off,
        ratio: retired_on as f64 / retired_off as f64,
        image_on: on.image_size(),
        image_off: off.image_size(),
        image_ratio: on.image_size() as f64 / off.image_size() as f64,
    })
}

/// Post-boot check of every data cell that holds a function pointer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCheck {
    pub cells: usize,
    pub prekey_consumed: usize,
    pub bad: Vec<String>,
}

/// Cells are found independently of the patch table: every 8-byte data
/// cell outside `@constant_ctx` globals that holds a function entry after a
/// no-PA boot must, after a PA boot, be signed for its own address and
/// authenticate to the same entry.
pub fn check_boot_patching(m: &Module, seed: u64) -> Result<PatchCheck, HarnessError> {
    let on = instrument::build(m, BuildOptions::default())?;
    let off = instrument::build(m, BuildOptions::no_pa())?;
    let s_on = machine::boot(&on, seed)?;
    let s_off = machine::boot(&off, seed)?;
    let entries: BTreeSet<u64> = off.fnidx.iter().filter_map(|f| off.symbol_addr(&format!("@{f}"))).collect();
    let trusted: BTreeSet<&str> =
        m.globals.iter().filter(|g| g.annotation == Some(Annotation::ConstantCtx)).map(|g| g.name.as_str()).collect();
    let mut out = PatchCheck { prekey_consumed: s_on.prekey_consumed, ..PatchCheck::default() };
    for sym in off.data.symbols.iter().filter(|s| !trusted.contains(s.name.as_str())) {
        let mut off_in = 0;
        while off_in + 8 <= sym.size {
            let addr = DATA_BASE + sym.offset + off_in;
            let plain = s_off.mem.read_u64(addr).unwrap_or(0);
            if entries.contains(&plain) {
                out.cells += 1;
                let name = off.function_at(((plain - crate::isa::memmap::TEXT_BASE) / 4) as usize).map(|f| f.name);
                let fn_on = name.as_deref().and_then(|n| on.symbol_addr(&format!("@{n}")));
                let w = s_on.mem.read_u64(addr).unwrap_or(0);
                let auth = codec::authenticate(s_on.key_ia, PointerWord(w), addr).0;
                if classify(w) != PointerClass::Paced || Some(auth) != fn_on {
                    out.bad.push(format!("@{}+{off_in}: {w:#x}", sym.name));
                }
            }
            off_in += 8;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub fp: FpScore,
    pub coverage: CoverageReport,
    pub outputs_on: BTreeMap<String, u64>,
    pub outputs_off: BTreeMap<String, u64>,
    pub overhead: Option<Overhead>,
    pub boot_patching: PatchCheck,
    pub diagnostics: Vec<String>,
    pub failures: Vec<String>,
}

pub fn run_case(case: &CorpusCase, seed: u64) -> CaseReport {
    let mut r = CaseReport { name: case.name.clone(), ..CaseReport::default() };
    if let Err(e) = case_checks(case, seed, &mut r) {
        r.failures.push(e.to_string());
    }
    r
}

fn case_checks(case: &CorpusCase, seed: u64, r: &mut CaseReport) -> Result<(), HarnessError> {
    let m = case.module()?;
    let facts = analysis::analyze_module(&m)?;
    r.diagnostics = facts.diagnostics.clone();
    match &case.labels {
        Some(labels) => {
            let unresolved = unresolved_labels(&m, labels);
            if !unresolved.is_empty() {
                r.failures.push(format!("labels do not resolve: {}", unresolved.join(", ")));
            }
            r.fp = score(&facts.dump(), labels);
            if !r.fp.missing.is_empty() || !r.fp.extra.is_empty() {
                r.failures.push(format!("fp set differs: missing {:?}, extra {:?}", r.fp.missing, r.fp.extra));
            }
        }
        None => r.failures.push("no labels file".into()),
    }
    let on = instrument::build(&m, BuildOptions::default())?;
    let off = instrument::build(&m, BuildOptions::no_pa())?;
    r.coverage = coverage_scan(&on);
    if !r.coverage.offenders.is_empty() {
        r.failures.push(format!("coverage offenders: {:?}", r.coverage.offenders));
    }
    let (s_on, _) = run_counted(&on, seed)?;
    let (s_off, _) = run_counted(&off, seed)?;
    for (tag, s) in [("PA-on", &s_on), ("PA-off", &s_off)] {
        if !s.halted() {
            r.failures.push(format!("{tag} run stopped with {:?}", s.trap));
        }
    }
    r.outputs_on = s_on.output_cells();
    r.outputs_off = s_off.output_cells();
    if r.outputs_on != r.outputs_off {
        r.failures.push("output cells differ between PA-on and PA-off".into());
    }
    match &case.expected {
        Some(exp) => {
            if r.outputs_off != exp.outputs {
                r.failures.push(format!("outputs {:?} != expected {:?}", r.outputs_off, exp.outputs));
            }
            let c = &r.coverage;
            let got = ExpectedCoverage { blr: c.blr, blraa: c.blraa, retaa: c.retaa, ret: c.ret };
            if got != exp.coverage {
                r.failures.push(format!("coverage {got:?} != expected {:?}", exp.coverage));
            }
        }
        None => r.failures.push("no expected.json".into()),
    }
    r.overhead = Some(overhead_report(&m, seed)?);
    r.boot_patching = check_boot_patching(&m, seed)?;
    if !r.boot_patching.bad.is_empty() {
        r.failures.push(format!("unpatched cells: {:?}", r.boot_patching.bad));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub expect: Option<Expect>,
    pub outcome: Option<Outcome>,
    pub ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub failed_cases: usize,
    pub precision: f64,
    pub recall: f64,
    pub coverage: CoverageReport,
    pub scenarios_ok: usize,
    pub scenarios: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub cases: Vec<CaseReport>,
    pub scenarios: Vec<ScenarioResult>,
    pub guess_pac: Option<GuessStats>,
    /// Interrupt sweeps over the frames program, keyed by build.
    pub sweeps: BTreeMap<String, SweepReport>,
    pub summary: Summary,
    pub failures: Vec<String>,
}

/// Runs every scenario of the catalog and checks it against its expectation.
pub fn run_catalog(seed: u64) -> Vec<ScenarioResult> {
    adversary::scenario_catalog()
        .par_iter()
        .filter(|sc| sc.expect != Some(Expect::Statistical))
        .map(|sc| match adversary::run_scenario(sc, seed) {
            Ok(v) => ScenarioResult {
                name: sc.name.clone(),
                expect: sc.expect,
                ok: sc.expect.is_none_or(|e| v.outcome.matches(e)),
                outcome: Some(v.outcome),
            },
            Err(_) => ScenarioResult { name: sc.name.clone(), expect: sc.expect, outcome: None, ok: false },
        })
        .collect()
}

/// Interrupt sweeps on the retaa, legacy and plain-handler configurations.
pub fn run_sweeps(seed: u64) -> Result<BTreeMap<String, SweepReport>, HarnessError> {
    let retaa = adversary::frames_program(BuildOptions::default());
    let legacy = adversary::frames_program(BuildOptions::legacy());
    let guarded = MachineConfig::default();
    let plain = MachineConfig { plain_irq: true, ..guarded };
    let mut out = BTreeMap::new();
    out.insert("retaa".into(), adversary::interrupt_sweep(&retaa, seed, guarded)?);
    out.insert("retaa_plain_handler".into(), adversary::interrupt_sweep(&retaa, seed, plain)?);
    out.insert("legacy_ret".into(), adversary::interrupt_sweep(&legacy, seed, guarded)?);
    Ok(out)
}

/// Runs every corpus case under both builds plus the scenario catalog.
pub fn run_suite(corpus: &Path, seed: u64) -> Result<Report, HarnessError> {
    let cases = load_corpus(corpus)?;
    let mut report = Report { seed, ..Report::default() };
    if cases.is_empty() {
        return Ok(report);
    }
    report.cases = cases.par_iter().map(|c| run_case(c, seed)).collect();
    report.scenarios = run_catalog(seed);
    let guess = adversary::guess_pac_trials(seed, adversary::GUESS_TRIALS)?;
    report.sweeps = run_sweeps(seed)?;
    for c in &report.cases {
        report.failures.extend(c.failures.iter().map(|f| format!("{}: {f}", c.name)));
        report.summary.coverage.add(&c.coverage);
    }
    for s in report.scenarios.iter().filter(|s| !s.ok) {
        report.failures.push(format!("scenario {}: expected {:?}, got {:?}", s.name, s.expect, s.outcome));
    }
    if !guess.within {
        report.failures.push(format!("guess_pac: {} successes outside {:?}", guess.successes, guess.interval));
    }
    if let Some(r) = report.sweeps.get("retaa").filter(|r| r.hijacked > 0) {
        report.failures.push(format!("retaa interrupt sweep hijacked at {:?}", r.hijack_points));
    }
    report.guess_pac = Some(guess);
    let s = &mut report.summary;
    s.cases = report.cases.len();
    s.failed_cases = report.cases.iter().filter(|c| !c.failures.is_empty()).count();
    let (ident, lab, hit) = report.cases.iter().fold((0, 0, 0), |(i, l, h), c| {
        let matched = c.fp.labeled - c.fp.missing.len();
        (i + c.fp.identified, l + c.fp.labeled, h + matched)
    });
    s.precision = if ident == 0 { 1.0 } else { hit as f64 / ident as f64 };
    s.recall = if lab == 0 { 1.0 } else { hit as f64 / lab as f64 };
    s.scenarios = report.scenarios.len();
    s.scenarios_ok = report.scenarios.iter().filter(|r| r.ok).count();
    Ok(report)
}

/// Suite over the corpus only, without the adversary runs.
pub fn run_cases(corpus: &Path, seed: u64) -> Result<Vec<CaseReport>, HarnessError> {
    Ok(load_corpus(corpus)?.par_iter().map(|c| run_case(c, seed)).collect())
}

impl Report {
    /// Plain-text table of the report.
    pub fn render(&self) -> String {
        let mut out = format!("seed {}\n", self.seed);
        out.push_str("case                    prec   recall blr blraa retaa ret  on/off        ratio\n");
        for c in &self.cases {
            let (on, off, ratio) = c.overhead.as_ref().map_or((0, 0, 0.0), |o| (o.retired_on, o.retired_off, o.ratio));
            out.push_str(&format!(
                "{:<22} {:>6.3} {:>6.3} {:>3} {:>5} {:>5} {:>3} {:>6}/{:<6} {:>6.3}{}\n",
                c.name,
                c.fp.precision,
                c.fp.recall,
                c.coverage.blr,
                c.coverage.blraa,
                c.coverage.retaa,
                c.coverage.ret,
                on,
                off,
                ratio,
                if c.failures.is_empty() { "" } else { "  FAIL" }
            ));
        }
        out.push('\n');
        for s in &self.scenarios {
            let got = s.outcome.map_or("ERROR", |o| o.label());
            out.push_str(&format!("{:<36} {:<12} {}\n", s.name, got, if s.ok { "ok" } else { "FAIL" }));
        }
        if let Some(g) = &self.guess_pac {
            out.push_str(&format!(
                "guess_pac                            {}/{} hits, interval [{}, {}]\n",
                g.successes, g.trials, g.interval.0, g.interval.1
            ));
        }
        for (name, r) in &self.sweeps {
            out.push_str(&format!(
                "sweep {name:<30} points {:>4} blocked {:>4} hijacked {:>4} ineffective {:>4}\n",
                r.points, r.blocked, r.hijacked, r.ineffective
            ));
        }
        out.push_str(&format!(
            "\n{} cases, {} failed; precision {:.3}, recall {:.3}; {} raw blr; {}/{} scenarios as expected\n",
            self.summary.cases,
            self.summary.failed_cases,
            self.summary.precision,
            self.summary.recall,
            self.summary.coverage.blr,
            self.summary.scenarios_ok,
            self.summary.scenarios
        ));
        for f in &self.failures {
            out.push_str(&format!("FAIL {f}\n"));
        }
        out
    }
}
