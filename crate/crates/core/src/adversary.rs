//! Scripted attacker with arbitrary memory read/write but no register
//! access and no code writes, plus the scenario catalog.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, PointerWord, PAC_SHIFT};
use crate::instrument::{self, BuildOptions, InstrumentError, MachineProgram, ObjectError};
use crate::ir;
use crate::isa::memmap::{self, FNIDX_BASE, FNREV_BASE, IRQ_FRAME, IRQ_FRAME_WORDS, TEXT_BASE};
use crate::isa::MInst;
use crate::machine::{self, MachineConfig, MachineError, MachineState, TraceEvent, TrapKind, DEFAULT_FUEL};

const VICTIM_IR: &str = include_str!("../../../corpus/attack_ops.ir");
const FRAMES_IR: &str = include_str!("../../../corpus/fig8_toctou.ir");

/// Trials in the PAC guessing experiment.
pub const GUESS_TRIALS: u32 = 1280;
/// 99% central binomial interval for `GUESS_TRIALS` trials at p = 1/128.
pub const GUESS_INTERVAL: (u32, u32) = (3, 19);

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("invalid schedule: {0}")]
    ScheduleInvalid(String),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Object(#[from] ObjectError),
    #[error(transparent)]
    Build(#[from] InstrumentError),
    #[error(transparent)]
    Ir(#[from] ir::IrError),
    #[error("scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario file: {0}")]
    Json(#[from] serde_json::Error),
}

/// When a schedule entry fires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    /// Once exactly this many instructions have retired.
    Retired(u64),
    /// The `nth` (0-based) time pc reaches `label`.
    Label {
        label: String,
        #[serde(default)]
        nth: u32,
    },
    /// The `nth` time pc sits on a return instruction of `function`.
    Return {
        function: String,
        #[serde(default)]
        nth: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Addr {
    Abs(u64),
    /// A global or function symbol plus a byte offset.
    Sym {
        sym: String,
        #[serde(default)]
        off: i64,
    },
    /// Offset from the stack pointer of the running frame; stands for a
    /// leaked stack address.
    Sp(i64),
    /// Word `i` of the interrupt spill frame (29 is lr).
    IrqSlot(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Value {
    Word(u64),
    Sym {
        sym: String,
        #[serde(default)]
        off: i64,
    },
    /// The `k`-th word read so far.
    Read(usize),
    /// The `k`-th word read so far with its PAC bits cleared.
    Stripped(usize),
    /// Raw address of a symbol carrying a chosen PAC.
    WithPac {
        sym: String,
        pac: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    MemWrite {
        addr: Addr,
        value: Value,
    },
    MemRead {
        addr: Addr,
    },
    /// Take an interrupt; `during` runs while registers sit in the spill frame.
    InjectInterrupt {
        #[serde(default)]
        during: Vec<Action>,
    },
}

impl Action {
    fn mutates(&self) -> bool {
        match self {
            Action::MemWrite { .. } => true,
            Action::MemRead { .. } => false,
            Action::InjectInterrupt { during } => during.iter().any(Action::mutates),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub at: Trigger,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    Blocked,
    Hijacked,
    /// Success rate is judged over many seeds.
    Statistical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackScenario {
    pub name: String,
    pub program: MachineProgram,
    pub schedule: Vec<ScheduleEntry>,
    /// Success when pc reaches this value after the first memory write.
    pub target: Value,
    pub config: MachineConfig,
    pub expect: Option<Expect>,
}

/// On-disk scenario: `obj` is an object file path relative to the JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub obj: String,
    pub schedule: Vec<ScheduleEntry>,
    pub target: Value,
    #[serde(default)]
    pub plain_irq: bool,
    #[serde(default)]
    pub pa_off: bool,
    #[serde(default)]
    pub expect: Option<Expect>,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<AttackScenario, AdversaryError> {
        let file: ScenarioFile = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| AdversaryError::ScheduleInvalid(e.to_string()))?;
        let obj = path.parent().unwrap_or(Path::new(".")).join(&file.obj);
        let program = MachineProgram::parse(&std::fs::read_to_string(obj)?)?;
        Ok(AttackScenario {
            name: file.name,
            program,
            schedule: file.schedule,
            target: file.target,
            config: MachineConfig { pa_off: file.pa_off, plain_irq: file.plain_irq, trace: false },
            expect: file.expect,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "trap", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Blocked(TrapKind),
    Hijacked,
    Ineffective,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Blocked(_) => "BLOCKED",
            Outcome::Hijacked => "HIJACKED",
            Outcome::Ineffective => "INEFFECTIVE",
        }
    }

    pub fn matches(&self, e: Expect) -> bool {
        matches!((self, e), (Outcome::Blocked(_), Expect::Blocked) | (Outcome::Hijacked, Expect::Hijacked))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackVerdict {
    pub scenario: String,
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: Outcome,
    pub retired: u64,
    pub reads: Vec<u64>,
    pub trace: Vec<TraceEvent>,
}

/// Text and the function index tables are mapped read-only.
fn read_only(p: &MachineProgram, addr: u64) -> bool {
    let ro = [
        (TEXT_BASE, memmap::text_addr(p.text.len())),
        (FNIDX_BASE, FNIDX_BASE + 8 * (p.fnidx.len() as u64 + 1)),
        (FNREV_BASE, FNREV_BASE + 4 * p.text.len() as u64),
    ];
    ro.iter().any(|&(a, b)| addr < b && addr.wrapping_add(8) > a)
}

fn static_addr(p: &MachineProgram, a: &Addr) -> Option<u64> {
    match a {
        Addr::Abs(v) => Some(*v),
        Addr::Sym { sym, off } => {
            let name = if sym.starts_with('@') { sym.clone() } else { format!("@{sym}") };
            p.symbol_addr(&name).map(|x| x.wrapping_add(*off as u64))
        }
        _ => None,
    }
}

/// Rejects schedules outside the threat model.
pub fn validate(sc: &AttackScenario) -> Result<(), AdversaryError> {
    fn check(
        p: &MachineProgram,
        a: &Action,
        in_irq: bool,
        reads: &mut usize,
        name: &str,
    ) -> Result<(), AdversaryError> {
        let bad = |m: String| Err(AdversaryError::ScheduleInvalid(format!("{name}: {m}")));
        let addr_ok = |addr: &Addr| -> Result<(), AdversaryError> {
            match addr {
                Addr::IrqSlot(i) if !in_irq || *i >= IRQ_FRAME_WORDS => {
                    Err(AdversaryError::ScheduleInvalid(format!("{name}: interrupt slot {i} outside an interrupt")))
                }
                _ => Ok(()),
            }
        };
        match a {
            Action::MemRead { addr } => {
                addr_ok(addr)?;
                *reads += 1;
            }
            Action::MemWrite { addr, value } => {
                addr_ok(addr)?;
                if static_addr(p, addr).is_some_and(|at| read_only(p, at)) {
                    return bad(format!("write to read-only image via {addr:?}"));
                }
                if let Value::Read(k) | Value::Stripped(k) = value {
                    if *k >= *reads {
                        return bad(format!("value uses read {k} before it happens"));
                    }
                }
            }
            Action::InjectInterrupt { during } => {
                if in_irq {
                    return bad("nested interrupt".into());
                }
                for d in during {
                    check(p, d, true, reads, name)?;
                }
            }
        }
        Ok(())
    }
    let mut reads = 0;
    for e in &sc.schedule {
        check(&sc.program, &e.action, false, &mut reads, &sc.name)?;
        match &e.at {
            Trigger::Label { label, .. } if sc.program.label_addr(label).is_none() => {
                return Err(AdversaryError::ScheduleInvalid(format!("{}: unknown label {label}", sc.name)));
            }
            Trigger::Return { function, .. } if !sc.program.functions().iter().any(|f| &f.name == function) => {
                return Err(AdversaryError::ScheduleInvalid(format!("{}: unknown function {function}", sc.name)));
            }
            _ => {}
        }
    }
    Ok(())
}

struct Driver<'a> {
    sc: &'a AttackScenario,
    reads: Vec<u64>,
    fired: Vec<bool>,
    seen: Vec<u32>,
    armed: bool,
}

impl Driver<'_> {
    fn symbol(&self, s: &MachineState, sym: &str, off: i64) -> Result<u64, AdversaryError> {
        let name = if sym.starts_with('@') { sym.to_string() } else { format!("@{sym}") };
        s.symbol_addr(&name)
            .map(|a| a.wrapping_add(off as u64))
            .ok_or_else(|| AdversaryError::ScheduleInvalid(format!("unknown symbol {sym}")))
    }

    fn addr(&self, s: &MachineState, a: &Addr) -> Result<u64, AdversaryError> {
        let addr = match a {
            Addr::Abs(v) => *v,
            Addr::Sym { sym, off } => self.symbol(s, sym, *off)?,
            Addr::Sp(off) => s.sp.wrapping_add(*off as u64),
            Addr::IrqSlot(i) => IRQ_FRAME + 8 * i,
        };
        Ok(addr)
    }

    fn value(&self, s: &MachineState, v: &Value) -> Result<u64, AdversaryError> {
        let read = |k: usize| {
            self.reads.get(k).copied().ok_or_else(|| AdversaryError::ScheduleInvalid(format!("read {k} missing")))
        };
        Ok(match v {
            Value::Word(w) => *w,
            Value::Sym { sym, off } => self.symbol(s, sym, *off)?,
            Value::Read(k) => read(*k)?,
            Value::Stripped(k) => codec::strip(PointerWord(read(*k)?)).0,
            Value::WithPac { sym, pac } => {
                let raw = self.symbol(s, sym, 0)?;
                (raw & !(0x7f << PAC_SHIFT)) | (u64::from(*pac & 0x7f) << PAC_SHIFT)
            }
        })
    }

    fn writable(&self, addr: u64) -> Result<(), AdversaryError> {
        if read_only(&self.sc.program, addr) {
            return Err(AdversaryError::ScheduleInvalid(format!("write to read-only image at {addr:#x}")));
        }
        Ok(())
    }

    fn mem_op(&mut self, s: &mut MachineState, a: &Action) -> Result<(), AdversaryError> {
        match a {
            Action::MemRead { addr } => {
                let at = self.addr(s, addr)?;
                let w = s
                    .mem
                    .read_u64(at)
                    .map_err(|x| AdversaryError::ScheduleInvalid(format!("read of unmapped {x:#x}")))?;
                self.reads.push(w);
            }
            Action::MemWrite { addr, value } => {
                let at = self.addr(s, addr)?;
                self.writable(at)?;
                let v = self.value(s, value)?;
                s.mem
                    .write_u64(at, v)
                    .map_err(|x| AdversaryError::ScheduleInvalid(format!("write to unmapped {x:#x}")))?;
            }
            Action::InjectInterrupt { .. } => unreachable!("validated"),
        }
        Ok(())
    }

    fn perform(&mut self, s: &mut MachineState, a: &Action) -> Result<(), AdversaryError> {
        if a.mutates() {
            self.armed = true;
        }
        match a {
            Action::InjectInterrupt { during } => {
                let mut ops = Vec::new();
                for d in during {
                    ops.push(match d {
                        Action::MemRead { addr } => (self.addr(s, addr)?, None),
                        Action::MemWrite { addr, value } => {
                            let at = self.addr(s, addr)?;
                            self.writable(at)?;
                            let v = match value {
                                Value::Read(_) | Value::Stripped(_) => value.clone(),
                                other => Value::Word(self.value(s, other)?),
                            };
                            (at, Some(v))
                        }
                        Action::InjectInterrupt { .. } => unreachable!("validated"),
                    });
                }
                let reads = &mut self.reads;
                let mut result = Ok(());
                s.inject_interrupt(|mem| {
                    for (at, v) in ops {
                        let r = match v {
                            None => mem.read_u64(at).map(|w| reads.push(w)),
                            Some(v) => {
                                let w = match v {
                                    Value::Word(w) => w,
                                    Value::Read(k) => reads[k],
                                    Value::Stripped(k) => codec::strip(PointerWord(reads[k])).0,
                                    _ => unreachable!("resolved"),
                                };
                                mem.write_u64(at, w)
                            }
                        };
                        if let Err(x) = r {
                            result = Err(AdversaryError::ScheduleInvalid(format!("access to unmapped {x:#x}")));
                            return;
                        }
                    }
                });
                result
            }
            other => self.mem_op(s, other),
        }
    }

    fn fire(&mut self, s: &mut MachineState) -> Result<(), AdversaryError> {
        for i in 0..self.sc.schedule.len() {
            if self.fired[i] || s.trap.is_some() {
                continue;
            }
            let hit = match &self.sc.schedule[i].at {
                Trigger::Retired(n) => s.retired == *n,
                Trigger::Label { label, nth } => {
                    let here = s.program().label_addr(label) == Some(s.pc);
                    self.count(i, here, *nth)
                }
                Trigger::Return { function, nth } => {
                    let here = s.text_index(s.pc).is_some_and(|idx| {
                        matches!(s.program().text[idx], MInst::Ret | MInst::Retaa)
                            && s.program().function_at(idx).is_some_and(|f| &f.name == function)
                    });
                    self.count(i, here, *nth)
                }
            };
            if hit {
                self.fired[i] = true;
                let action = self.sc.schedule[i].action.clone();
                self.perform(s, &action)?;
            }
        }
        Ok(())
    }

    fn count(&mut self, i: usize, here: bool, nth: u32) -> bool {
        if !here {
            return false;
        }
        let n = self.seen[i];
        self.seen[i] += 1;
        n == nth
    }
}

/// Runs a scenario from an already booted state.
pub fn run_from(sc: &AttackScenario, mut s: MachineState, fuel: u64) -> Result<AttackVerdict, AdversaryError> {
    let n = sc.schedule.len();
    let mut d = Driver { sc, reads: Vec::new(), fired: vec![false; n], seen: vec![0; n], armed: false };
    let mut left = fuel;
    let outcome = loop {
        d.fire(&mut s)?;
        if d.armed && s.trap.is_none() {
            if let Ok(t) = d.value(&s, &sc.target) {
                if s.pc == t {
                    break Outcome::Hijacked;
                }
            }
        }
        match s.trap {
            Some(TrapKind::Halt) => break Outcome::Ineffective,
            Some(t) => break Outcome::Blocked(t),
            None => {}
        }
        if left == 0 {
            break Outcome::Ineffective;
        }
        s.step();
        left -= 1;
    };
    Ok(AttackVerdict {
        scenario: sc.name.clone(),
        seed: 0,
        outcome,
        retired: s.retired,
        reads: d.reads,
        trace: std::mem::take(&mut s.trace),
    })
}

pub fn run_scenario(sc: &AttackScenario, seed: u64) -> Result<AttackVerdict, AdversaryError> {
    validate(sc)?;
    let config = MachineConfig { trace: true, ..sc.config };
    let s = machine::boot_with(&sc.program, seed, config)?;
    let mut v = run_from(sc, s, DEFAULT_FUEL)?;
    v.seed = seed;
    Ok(v)
}

fn build_ir(src: &str, opts: BuildOptions) -> MachineProgram {
    let m = ir::parse_module(src).expect("bundled scenario program parses");
    instrument::build(&m, opts).expect("bundled scenario program builds")
}

pub fn victim_program(opts: BuildOptions) -> MachineProgram {
    build_ir(VICTIM_IR, opts)
}

pub fn frames_program(opts: BuildOptions) -> MachineProgram {
    build_ir(FRAMES_IR, opts)
}

fn at_label(label: &str, nth: u32) -> Trigger {
    Trigger::Label { label: label.into(), nth }
}

fn sym(s: &str) -> Value {
    Value::Sym { sym: s.into(), off: 0 }
}

fn cell(s: &str, off: i64) -> Addr {
    Addr::Sym { sym: s.into(), off }
}

fn write(at: Trigger, addr: Addr, value: Value) -> ScheduleEntry {
    ScheduleEntry { at, action: Action::MemWrite { addr, value } }
}

fn read(at: Trigger, addr: Addr) -> ScheduleEntry {
    ScheduleEntry { at, action: Action::MemRead { addr } }
}

fn scenario(
    name: &str,
    program: MachineProgram,
    schedule: Vec<ScheduleEntry>,
    target: Value,
    expect: Expect,
) -> AttackScenario {
    AttackScenario {
        name: name.into(),
        program,
        schedule,
        target,
        config: MachineConfig::default(),
        expect: Some(expect),
    }
}

/// Overwrites a statically signed handler with the raw gadget address.
pub fn fp_corruption(opts: BuildOptions) -> AttackScenario {
    let expect = if opts.pa { Expect::Blocked } else { Expect::Hijacked };
    scenario(
        "fp_corruption",
        victim_program(opts),
        vec![write(at_label("@main", 0), cell("ops_b", 8), sym("gadget"))],
        sym("gadget"),
        expect,
    )
}

/// Replays the signed handler of one object into another object's slot.
pub fn fp_substitution(opts: BuildOptions) -> AttackScenario {
    let (name, expect) = if opts.compat_type_ctx {
        ("fp_substitution_same_type_compat", Expect::Hijacked)
    } else {
        ("fp_substitution_cross_address", if opts.pa { Expect::Blocked } else { Expect::Hijacked })
    };
    scenario(
        name,
        victim_program(opts),
        vec![
            read(at_label("@main", 0), cell("ops_a", 8)),
            write(at_label("@main", 0), cell("ops_b", 8), Value::Read(0)),
        ],
        sym("handler_a"),
        expect,
    )
}

/// Overwrites a saved return address with the gadget address.
pub fn ret_corruption(opts: BuildOptions) -> AttackScenario {
    let expect = if opts.pa { Expect::Blocked } else { Expect::Hijacked };
    scenario(
        "ret_corruption",
        frames_program(opts),
        vec![write(at_label("work.entry", 0), Addr::Sp(0), sym("gadget"))],
        sym("gadget"),
        expect,
    )
}

/// Copies a signed return address saved by one activation of `work` into
/// the frame of a later activation at a different stack depth.
pub fn ret_replay_cross_frame(opts: BuildOptions) -> AttackScenario {
    let expect = if opts.pa { Expect::Blocked } else { Expect::Hijacked };
    scenario(
        "ret_replay_cross_frame",
        frames_program(opts),
        vec![
            read(at_label("work.entry", 0), Addr::Sp(0)),
            write(at_label("work.entry", 1), Addr::Sp(0), Value::Read(0)),
        ],
        Value::Stripped(0),
        expect,
    )
}

/// Interrupt on the return instruction of `work`; the handler window
/// rewrites the spilled lr.
pub fn toctou(opts: BuildOptions) -> AttackScenario {
    let (name, expect) = if opts.legacy_ret {
        ("toctou_legacy_ret", Expect::Hijacked)
    } else {
        ("toctou_retaa", if opts.pa { Expect::Blocked } else { Expect::Hijacked })
    };
    scenario(
        name,
        frames_program(opts),
        vec![ScheduleEntry {
            at: Trigger::Return { function: "work".into(), nth: 0 },
            action: Action::InjectInterrupt {
                during: vec![Action::MemWrite { addr: Addr::IrqSlot(29), value: sym("gadget") }],
            },
        }],
        sym("gadget"),
        expect,
    )
}

/// Plants the raw gadget in a handler slot that the program loads and
/// re-stores elsewhere, hoping the store signs it.
pub fn signing_gadget(opts: BuildOptions) -> AttackScenario {
    let (name, expect) = if opts.load_auth {
        ("signing_gadget", if opts.pa { Expect::Blocked } else { Expect::Hijacked })
    } else {
        ("signing_gadget_no_load_auth", Expect::Hijacked)
    };
    scenario(
        name,
        victim_program(opts),
        vec![write(at_label("@migrate", 0), cell("ops_a", 8), sym("gadget"))],
        sym("gadget"),
        expect,
    )
}

/// Corrupts a freshly stored handler inside an interrupt taken right after
/// the store, before the function returns.
pub fn store_window(opts: BuildOptions) -> AttackScenario {
    let expect = if opts.pa { Expect::Blocked } else { Expect::Hijacked };
    scenario(
        "store_window",
        victim_program(opts),
        vec![ScheduleEntry {
            at: Trigger::Return { function: "migrate".into(), nth: 0 },
            action: Action::InjectInterrupt {
                during: vec![Action::MemWrite { addr: cell("saved", 8), value: sym("gadget") }],
            },
        }],
        sym("gadget"),
        expect,
    )
}

/// A single forged pointer carrying PAC guess `pac`.
pub fn guess_pac(opts: BuildOptions, pac: u8) -> AttackScenario {
    scenario(
        "guess_pac",
        victim_program(opts),
        vec![write(at_label("@main", 0), cell("ops_b", 8), Value::WithPac { sym: "gadget".into(), pac })],
        sym("gadget"),
        Expect::Statistical,
    )
}

/// Every scenario on the protected build followed by its weakened pair.
pub fn scenario_catalog() -> Vec<AttackScenario> {
    let pa = BuildOptions::default();
    let nopa = BuildOptions::no_pa();
    let compat = BuildOptions { compat_type_ctx: true, ..pa };
    let no_load_auth = BuildOptions { load_auth: false, ..pa };
    let mut out = vec![
        fp_corruption(pa),
        fp_corruption(nopa),
        fp_substitution(pa),
        fp_substitution(compat),
        ret_corruption(pa),
        ret_corruption(nopa),
        ret_replay_cross_frame(pa),
        ret_replay_cross_frame(nopa),
        toctou(BuildOptions::legacy()),
        toctou(pa),
        signing_gadget(pa),
        signing_gadget(no_load_auth),
        store_window(pa),
        store_window(nopa),
        guess_pac(pa, 0),
    ];
    for sc in &mut out {
        if !sc.program.opts.pa {
            sc.name.push_str("_nopa");
        }
    }
    out
}

/// Result of the single-guess experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuessStats {
    pub trials: u32,
    pub successes: u32,
    pub interval: (u32, u32),
    pub within: bool,
}

/// One forged pointer per trial, each trial under a fresh seed and the
/// guess `trial % 128`.
pub fn guess_pac_trials(base_seed: u64, trials: u32) -> Result<GuessStats, AdversaryError> {
    let p = victim_program(BuildOptions::default());
    let hits: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut sc = guess_pac(BuildOptions::default(), (i % 128) as u8);
            sc.program = p.clone();
            run_scenario(&sc, base_seed.wrapping_add(u64::from(i))).map(|v| v.outcome == Outcome::Hijacked)
        })
        .collect::<Result<_, _>>()?;
    let successes = hits.iter().filter(|h| **h).count() as u32;
    Ok(GuessStats {
        trials,
        successes,
        interval: GUESS_INTERVAL,
        within: (GUESS_INTERVAL.0..=GUESS_INTERVAL.1).contains(&successes),
    })
}

/// Outcome counts over every interrupt point of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: u64,
    pub blocked: u64,
    pub hijacked: u64,
    pub ineffective: u64,
    /// Retired counts (after boot) at which control was hijacked.
    pub hijack_points: Vec<u64>,
    /// Hijacks per function holding pc at the interrupt.
    pub by_function: BTreeMap<String, u64>,
}

/// Interrupts the run of `p` at every instruction boundary after boot and
/// rewrites the spilled lr with the address of `@gadget`.
pub fn interrupt_sweep(p: &MachineProgram, seed: u64, config: MachineConfig) -> Result<SweepReport, AdversaryError> {
    let booted = machine::boot_with(p, seed, config)?;
    let mut benign = booted.clone();
    benign.run(DEFAULT_FUEL)?;
    let total = benign.retired - booted.retired;
    let start = booted.retired;
    let results: Vec<(u64, Outcome, Option<String>)> = (0..=total)
        .into_par_iter()
        .map(|k| {
            let mut s = booted.clone();
            while s.retired < start + k && s.trap.is_none() {
                s.step();
            }
            let func = s.text_index(s.pc).and_then(|i| p.function_at(i)).map(|f| f.name);
            let sc = AttackScenario {
                name: "interrupt_sweep".into(),
                program: p.clone(),
                schedule: vec![ScheduleEntry {
                    at: Trigger::Retired(start + k),
                    action: Action::InjectInterrupt {
                        during: vec![Action::MemWrite { addr: Addr::IrqSlot(29), value: sym("gadget") }],
                    },
                }],
                target: sym("gadget"),
                config,
                expect: None,
            };
            run_from(&sc, s, DEFAULT_FUEL).map(|v| (k, v.outcome, func))
        })
        .collect::<Result<_, _>>()?;
    let mut r = SweepReport { points: results.len() as u64, ..SweepReport::default() };
    for (k, o, func) in results {
        match o {
            Outcome::Blocked(_) => r.blocked += 1,
            Outcome::Ineffective => r.ineffective += 1,
            Outcome::Hijacked => {
                r.hijacked += 1;
                r.hijack_points.push(k);
                *r.by_function.entry(func.unwrap_or_default()).or_default() += 1;
            }
        }
    }
    Ok(r)
}
