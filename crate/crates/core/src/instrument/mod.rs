//! IR rewriting with PAC stubs, lowering to the toy ISA and object emission.

mod coverage;
mod lower;
mod object;
mod regalloc;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{analyze_module, init_fn_leaves, AnalysisError, FpFacts};
use crate::ir::{Annotation, Inst, IrError, Layout, Module, Opcode, Operand, Type};

pub use coverage::{coverage_scan, CoverageReport};
pub use lower::{lower, type_context};
pub use object::{DataImage, DataSymbol, FunctionRange, MachineProgram, ObjectError, PatchRecord, Reloc};
pub use regalloc::{allocate, Item};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error("@{function}: indirect call through {value} needs a source annotation")]
    MissingAnnotation { function: String, value: String },
    #[error("@{function}: {live} values live at once exceed the register pool")]
    RegisterPressure { function: String, live: usize },
    #[error("@{function}: cannot lower: {msg}")]
    Unsupported { function: String, msg: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// Code generation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Insert PAC stubs and signed returns.
    pub pa: bool,
    /// Split `autiasp; ret` epilogues instead of `retaa`.
    pub legacy_ret: bool,
    /// Authenticate function pointers on load (disabled only for ablation).
    pub load_auth: bool,
    /// Use a hash of the pointer's signature as the signing context.
    pub compat_type_ctx: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { pa: true, legacy_ret: false, load_auth: true, compat_type_ctx: false }
    }
}

impl BuildOptions {
    pub fn no_pa() -> Self {
        BuildOptions { pa: false, ..Self::default() }
    }

    pub fn legacy() -> Self {
        BuildOptions { legacy_ret: true, ..Self::default() }
    }
}

struct Rewriter<'a> {
    m: &'a Module,
    facts: &'a FpFacts,
    func: &'a str,
    defs: HashMap<&'a str, &'a Inst>,
    fresh: usize,
    out: Vec<Inst>,
    /// `pac_const` wrappers that must run at the end of a predecessor block.
    pending: BTreeMap<String, Vec<Inst>>,
}

impl<'a> Rewriter<'a> {
    fn is_fn(&self, op: &Operand) -> bool {
        matches!(op, Operand::Symbol(s) if self.m.function(s).is_some())
    }

    fn local_s0(&self, op: &Operand) -> bool {
        op.local().is_some_and(|l| self.facts.local_level(self.func, l) == Some(0))
    }

    fn def_of(&self, op: &Operand) -> Option<&'a Inst> {
        op.local().and_then(|l| self.defs.get(l).copied())
    }

    fn temp(&mut self, prefix: &str) -> String {
        self.fresh += 1;
        format!("${prefix}{}", self.fresh)
    }

    fn stub(&mut self, name: &str, args: Vec<Operand>, ty: Option<Type>, prefix: &str) -> Operand {
        let r = self.temp(prefix);
        let mut call = Inst::call(name, args).with_result(r.clone());
        call.ty = ty;
        self.out.push(call);
        Operand::Local(r)
    }

    fn fn_type(&self, op: &Operand) -> Option<Type> {
        match op {
            Operand::Symbol(s) => self.m.function(s).map(|f| Type::FnPtr(f.signature())),
            _ => None,
        }
    }

    /// Wraps a raw function symbol so it flows on as a piggyback value.
    fn wrap_fn(&mut self, op: &Operand) -> Operand {
        if self.is_fn(op) {
            let ty = self.fn_type(op);
            self.stub("pac_const", vec![op.clone()], ty, "c")
        } else {
            op.clone()
        }
    }

    fn rewrite(&mut self, inst: &Inst, module_has_fp: bool) -> Result<(), InstrumentError> {
        // Physical-address values stay raw until the call site.
        if inst.stub().is_some() || inst.annotation == Some(Annotation::Phys) {
            self.out.push(inst.clone());
            return Ok(());
        }
        if let (Some(Annotation::ConstantCtx), Some(r)) = (inst.annotation, &inst.result) {
            if r.ends_with("$raw") {
                self.out.push(inst.clone());
                return Ok(());
            }
            let raw = format!("{r}$raw");
            let mut plain = inst.clone();
            plain.result = Some(raw.clone());
            self.out.push(plain);
            let mut c = Inst::call("pac_const", vec![Operand::Local(raw)]).with_result(r.clone());
            c.ty = inst.ty.clone();
            self.out.push(c);
            return Ok(());
        }
        let ops = &inst.operands;
        match inst.opcode {
            Opcode::Store if self.is_fn(&ops[0]) || self.local_s0(&ops[0]) => {
                self.out.push(Inst::call("pac_store", ops.clone()));
            }
            Opcode::Load if inst.result.as_ref().is_some_and(|r| self.local_s0(&Operand::Local(r.clone()))) => {
                let mut c = Inst::call("pac_load", ops.clone()).with_result(inst.result.clone().unwrap());
                c.ty = inst.ty.clone();
                self.out.push(c);
            }
            Opcode::CallPtr => {
                let callee = &ops[0];
                let def = self.def_of(callee);
                if def.is_some_and(|d| d.is_stub("pac_call")) {
                    self.out.push(inst.clone());
                    return Ok(());
                }
                let missing = || InstrumentError::MissingAnnotation {
                    function: self.func.to_string(),
                    value: callee.to_string(),
                };
                if callee.local().is_none() {
                    return Err(missing());
                }
                let mut fp = callee.clone();
                match def {
                    Some(d) if d.annotation == Some(Annotation::Phys) => {
                        fp = self.stub("pac_const", vec![fp], d.ty.clone(), "p");
                    }
                    Some(d) if matches!(d.opcode, Opcode::Add | Opcode::Sub) => return Err(missing()),
                    _ => {}
                }
                let d = self.stub("pac_call", vec![fp], None, "d");
                let mut call = inst.clone();
                call.operands = std::iter::once(d).chain(ops[1..].iter().map(|a| self.wrap_fn(a))).collect();
                self.out.push(call);
            }
            Opcode::Memcpy | Opcode::Memmove if module_has_fp => {
                let name = if inst.opcode == Opcode::Memcpy { "pac_memcpy" } else { "pac_memmove" };
                self.out.push(Inst::call(name, ops.clone()));
            }
            Opcode::Icmp => {
                let mut cmp = inst.clone();
                for op in cmp.operands.iter_mut() {
                    let restored = self.def_of(op).is_some_and(|d| d.is_stub("pb_restore"));
                    if self.local_s0(op) && !restored {
                        *op = self.stub("pb_restore", vec![op.clone()], Some(Type::I64), "r");
                    }
                }
                self.out.push(cmp);
            }
            Opcode::Call | Opcode::Bitcast | Opcode::Mov | Opcode::Ret => {
                let mut i = inst.clone();
                i.operands = ops.iter().map(|a| self.wrap_fn(a)).collect();
                self.out.push(i);
            }
            Opcode::Phi => {
                let mut i = inst.clone();
                for (op, pred) in i.operands.iter_mut().zip(&inst.targets) {
                    if self.is_fn(op) {
                        let r = self.temp("c");
                        let mut c = Inst::call("pac_const", vec![op.clone()]).with_result(r.clone());
                        c.ty = self.fn_type(op);
                        self.pending.entry(pred.clone()).or_default().push(c);
                        *op = Operand::Local(r);
                    }
                }
                self.out.push(i);
            }
            _ => self.out.push(inst.clone()),
        }
        Ok(())
    }
}

/// Whether instrumentation has anything to protect in `m`.
pub fn module_has_fp(m: &Module, facts: &FpFacts) -> bool {
    !facts.set.is_empty() || !m.address_taken.is_empty()
}

/// Inserts PAC stubs around every function pointer store, load, indirect
/// call and comparison. Stubs already present are left alone.
pub fn instrument_ir(m: &Module, facts: &FpFacts) -> Result<Module, InstrumentError> {
    let has_fp = module_has_fp(m, facts);
    let mut out = m.clone();
    for (fi, f) in m.functions.iter().enumerate() {
        let defs = f.insts().filter_map(|i| i.result.as_deref().map(|r| (r, i))).collect();
        let fresh = f
            .insts()
            .filter_map(|i| i.result.as_deref())
            .filter_map(|r| r.strip_prefix('$').map(|t| t.trim_start_matches(char::is_alphabetic)))
            .filter_map(|n| n.parse::<usize>().ok())
            .max()
            .unwrap_or(0);
        let mut rw = Rewriter { m, facts, func: &f.name, defs, fresh, out: Vec::new(), pending: BTreeMap::new() };
        let mut blocks = Vec::new();
        for b in &f.blocks {
            rw.out.clear();
            for inst in &b.insts {
                rw.rewrite(inst, has_fp)?;
            }
            blocks.push(rw.out.clone());
        }
        for (b, insts) in out.functions[fi].blocks.iter_mut().zip(blocks) {
            b.insts = insts;
            if let Some(extra) = rw.pending.remove(&b.label) {
                let at = b.insts.len().saturating_sub(1);
                b.insts.splice(at..at, extra);
            }
        }
    }
    out.recompute_address_taken();
    Ok(out)
}

/// Static function pointer cells `(global, byte offset)` that boot must sign.
pub fn emit_patch_table(m: &Module, facts: &FpFacts) -> Vec<PatchRecord> {
    let layout = Layout::new(m);
    let mut out = Vec::new();
    for g in &m.globals {
        if g.annotation == Some(Annotation::ConstantCtx) || !facts.sgi.globals().contains(g.name.as_str()) {
            continue;
        }
        for (path, _) in init_fn_leaves(m, &g.ty, &g.init) {
            let idx: Vec<i64> = std::iter::once(0).chain(path.iter().map(|&i| i as i64)).collect();
            let Ok(info) = layout.gep(&Type::ptr(g.ty.clone()), &idx) else { continue };
            let sig = match info.result.pointee() {
                Some(Type::FnPtr(s)) => Some(s.clone()),
                _ => None,
            };
            out.push(PatchRecord { global: g.name.clone(), offset: info.offset as u64, sig });
        }
    }
    out
}

/// Analysis, instrumentation and lowering in one step.
pub fn build(m: &Module, opts: BuildOptions) -> Result<MachineProgram, InstrumentError> {
    if !opts.pa {
        return lower(m, &[], opts);
    }
    let facts = analyze_module(m)?;
    let instrumented = instrument_ir(m, &facts)?;
    let patches = emit_patch_table(m, &facts);
    lower(&instrumented, &patches, opts)
}
