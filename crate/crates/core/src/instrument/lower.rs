//! Instrumented IR to toy machine code.

use std::collections::{BTreeMap, HashMap};

use super::object::{DataImage, DataSymbol, MachineProgram, PatchRecord, Reloc};
use super::regalloc::{allocate, Item};
use super::{BuildOptions, InstrumentError};
use crate::codec::{
    CONST_CONTEXT, KERNEL_BASE, OFFSET_MASK, PAC_MASK, PAC_SHIFT, PB_ADDR_MASK, PB_INDEX_SHIFT, PB_PAC_SHIFT,
};
use crate::ir::{AggregateKind, Function, Init, Inst, Layout, Module, Opcode, Operand, Type, ValueTypes};
use crate::isa::memmap::FNREV_DELTA;
use crate::isa::{AluOp, Cond, MInst, Reg, Src, Sys, ARG_REGS, SCRATCH};

/// Signing context of a pointer type in type-context builds (FNV-1a of the
/// signature text).
pub fn type_context(sig: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sig.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn sig_of(ty: Option<&Type>) -> Option<&str> {
    match ty {
        Some(Type::FnPtr(s)) => Some(s),
        Some(Type::Ptr(inner)) => sig_of(Some(inner)),
        _ => None,
    }
}

fn write_init(
    m: &Module,
    layout: &Layout<'_>,
    ty: &Type,
    init: &Init,
    at: usize,
    img: &mut DataImage,
) -> Result<(), String> {
    match init {
        Init::Null | Init::Zero => Ok(()),
        Init::Int(v) => {
            let width = (layout.size_of(ty) as usize).clamp(1, 8);
            img.bytes[at..at + width].copy_from_slice(&v.to_le_bytes()[..width]);
            Ok(())
        }
        Init::Symbol(s) => {
            img.relocs.push(Reloc { offset: at as u64, symbol: format!("@{s}") });
            Ok(())
        }
        Init::Member(name, inner) => {
            let Type::Named(n) = ty else { return Err(format!("member initializer for {ty}")) };
            let def = m.typedef(n).ok_or_else(|| format!("unknown type %{n}"))?;
            let f = def.fields.iter().find(|f| &f.name == name).ok_or_else(|| format!("no member {name}"))?;
            write_init(m, layout, &f.ty, inner, at, img)
        }
        Init::Aggregate(items) => match ty {
            Type::Named(n) => {
                let def = m.typedef(n).ok_or_else(|| format!("unknown type %{n}"))?;
                let offsets = layout.field_offsets(n);
                for (k, item) in items.iter().enumerate() {
                    let f = def.fields.get(k).ok_or_else(|| format!("too many initializers for %{n}"))?;
                    write_init(m, layout, &f.ty, item, at + offsets[k] as usize, img)?;
                    if def.kind == AggregateKind::Union {
                        break;
                    }
                }
                Ok(())
            }
            Type::Array(elem, _) => {
                let size = layout.size_of(elem) as usize;
                for (k, item) in items.iter().enumerate() {
                    write_init(m, layout, elem, item, at + k * size, img)?;
                }
                Ok(())
            }
            _ => Err(format!("aggregate initializer for {ty}")),
        },
    }
}

fn build_data(m: &Module, layout: &Layout<'_>) -> Result<DataImage, InstrumentError> {
    let mut img = DataImage::default();
    for g in &m.globals {
        let align = layout.align_of(&g.ty).max(8) as usize;
        let size = layout.size_of(&g.ty);
        let at = img.bytes.len().next_multiple_of(align);
        img.bytes.resize(at + (size.max(8) as usize).next_multiple_of(8), 0);
        img.symbols.push(DataSymbol { name: g.name.clone(), offset: at as u64, size });
        write_init(m, layout, &g.ty, &g.init, at, &mut img)
            .map_err(|msg| InstrumentError::Unsupported { function: g.name.clone(), msg })?;
    }
    Ok(img)
}

struct FnLower<'a> {
    m: &'a Module,
    layout: &'a Layout<'a>,
    types: ValueTypes,
    f: &'a Function,
    opts: BuildOptions,
    items: Vec<Item>,
    locals: HashMap<String, Reg>,
    pac_calls: HashMap<String, (Reg, Reg)>,
    /// Phi copies owed on each (predecessor, successor) edge.
    phi_moves: HashMap<(String, String), Vec<(String, Operand)>>,
    edges: Vec<Item>,
    next_v: u32,
    next_label: usize,
    has_call: bool,
}

impl<'a> FnLower<'a> {
    fn err(&self, msg: impl Into<String>) -> InstrumentError {
        InstrumentError::Unsupported { function: self.f.name.clone(), msg: msg.into() }
    }

    fn v(&mut self) -> Reg {
        self.next_v += 1;
        Reg::V(self.next_v - 1)
    }

    fn emit(&mut self, i: MInst) {
        self.items.push(Item::Inst(i));
    }

    fn alu(&mut self, op: AluOp, rd: Reg, rn: Reg, imm: u64) {
        self.emit(MInst::alu(op, rd, rn, Src::Imm(imm as i64)));
    }

    fn fresh_label(&mut self) -> String {
        self.next_label += 1;
        format!("{}.$L{}", self.f.name, self.next_label)
    }

    fn block_label(&self, l: &str) -> String {
        format!("{}.{l}", self.f.name)
    }

    fn ret_label(&self) -> String {
        format!("{}.$ret", self.f.name)
    }

    fn local(&mut self, name: &str) -> Reg {
        if let Some(&r) = self.locals.get(name) {
            return r;
        }
        let r = self.v();
        self.locals.insert(name.to_string(), r);
        r
    }

    fn val(&mut self, op: &Operand) -> Result<Reg, InstrumentError> {
        Ok(match op {
            Operand::Local(n) => {
                if self.pac_calls.contains_key(n) {
                    return Err(self.err(format!("decoded pointer %{n} used outside an indirect call")));
                }
                self.local(n)
            }
            Operand::Symbol(s) => {
                let r = self.v();
                self.emit(MInst::Adrp { rd: r, sym: format!("@{s}") });
                r
            }
            Operand::Int(i) => {
                let r = self.v();
                self.emit(MInst::MovImm { rd: r, imm: *i as u64 });
                r
            }
            Operand::Null => {
                let r = self.v();
                self.emit(MInst::MovImm { rd: r, imm: 0 });
                r
            }
        })
    }

    fn src(&mut self, op: &Operand) -> Result<Src, InstrumentError> {
        match op {
            Operand::Int(i) => Ok(Src::Imm(*i)),
            Operand::Null => Ok(Src::Imm(0)),
            _ => self.val(op).map(Src::Reg),
        }
    }

    fn op_type(&self, op: &Operand) -> Option<Type> {
        self.types.operand(self.m, op)
    }

    /// Register holding the signing context: the storage address, or the
    /// type hash in type-context builds.
    fn context(&mut self, addr: Reg, sig: Option<&str>) -> Reg {
        if self.opts.compat_type_ctx {
            let r = self.v();
            self.emit(MInst::MovImm { rd: r, imm: type_context(sig.unwrap_or("")) });
            r
        } else {
            addr
        }
    }

    /// `rd = FNIDX[index of piggyback word pb]`.
    fn fnidx_lookup(&mut self, rd: Reg, pb: Reg) {
        self.alu(AluOp::Lsr, SCRATCH, pb, PB_INDEX_SHIFT as u64);
        self.alu(AluOp::Lsl, SCRATCH, SCRATCH, 3);
        self.emit(MInst::Adrp { rd, sym: "@__fnidx".into() });
        self.emit(MInst::alu(AluOp::Add, rd, rd, Src::Reg(SCRATCH)));
        self.emit(MInst::Ldr { rt: rd, rn: rd, off: 0 });
    }

    /// `rd = FNREV[raw]`; dereferences `raw` itself, so a poisoned word
    /// faults here.
    fn fnrev_lookup(&mut self, rd: Reg, raw: Reg) {
        self.emit(MInst::Ldrw { rt: rd, rn: raw, off: FNREV_DELTA as i64 });
    }

    /// `rd = index << 50 | pac << 43 | addr_field`, where `pac` holds the
    /// 7-bit code and `addr_field` is already shifted (or `None` for zero).
    fn pack(&mut self, rd: Reg, index: Reg, pac: Reg, addr: Option<Reg>) {
        self.alu(AluOp::Lsl, index, index, PB_INDEX_SHIFT as u64);
        self.alu(AluOp::Lsl, pac, pac, PB_PAC_SHIFT as u64);
        match addr {
            Some(a) => {
                self.emit(MInst::alu(AluOp::Orr, index, index, Src::Reg(pac)));
                self.emit(MInst::alu(AluOp::Orr, rd, index, Src::Reg(a)));
            }
            None => self.emit(MInst::alu(AluOp::Orr, rd, index, Src::Reg(pac))),
        }
    }

    fn pac_bits(&mut self, rd: Reg, word: Reg) {
        self.alu(AluOp::Lsr, rd, word, PAC_SHIFT as u64);
        self.alu(AluOp::And, rd, rd, 0x7f);
    }

    fn lower_pac_store(&mut self, inst: &Inst) -> Result<(), InstrumentError> {
        let (v, a) = (&inst.operands[0], &inst.operands[1]);
        let sig = sig_of(self.op_type(v).as_ref()).or(sig_of(self.op_type(a).as_ref())).map(str::to_string);
        let src = self.val(v)?;
        let w = self.v();
        self.emit(MInst::Mov { rd: w, rn: src });
        let addr = self.val(a)?;
        let (l_store, l_raw) = (self.fresh_label(), self.fresh_label());
        self.emit(MInst::Cmp { rn: w, src: Src::Imm(0) });
        self.emit(MInst::BCond { cond: Cond::Eq, target: l_store.clone() });
        self.alu(AluOp::Lsr, SCRATCH, w, 52);
        self.emit(MInst::Cmp { rn: SCRATCH, src: Src::Imm(0xfff) });
        self.emit(MInst::BCond { cond: Cond::Eq, target: l_raw.clone() });
        self.fnidx_lookup(w, w);
        self.items.push(Item::Label(l_raw));
        let ctx = self.context(addr, sig.as_deref());
        self.emit(MInst::Pacia { rd: w, rn: ctx });
        if self.f.init_text {
            self.emit(MInst::SysPrekey { rn: addr, rc: ctx });
        }
        self.items.push(Item::Label(l_store));
        self.emit(MInst::Str { rt: w, rn: addr, off: 0 });
        Ok(())
    }

    fn lower_pac_load(&mut self, inst: &Inst, r: Reg) -> Result<(), InstrumentError> {
        let addr = self.val(&inst.operands[0])?;
        let sig = sig_of(inst.ty.as_ref()).map(str::to_string);
        let done = self.fresh_label();
        self.emit(MInst::Ldr { rt: r, rn: addr, off: 0 });
        self.emit(MInst::Cmp { rn: r, src: Src::Imm(0) });
        self.emit(MInst::BCond { cond: Cond::Eq, target: done.clone() });
        let k = self.v();
        self.pac_bits(k, r);
        if self.opts.load_auth {
            let ctx = self.context(addr, sig.as_deref());
            self.emit(MInst::Autia { rd: r, rn: ctx });
        } else {
            self.alu(AluOp::Orr, r, r, PAC_MASK);
        }
        let idx = self.v();
        self.fnrev_lookup(idx, r);
        let field = self.v();
        self.alu(AluOp::And, field, addr, OFFSET_MASK);
        self.alu(AluOp::Lsr, field, field, 2);
        self.pack(r, idx, k, Some(field));
        self.items.push(Item::Label(done));
        Ok(())
    }

    fn lower_pac_call(&mut self, inst: &Inst, result: &str) -> Result<(), InstrumentError> {
        let fp = &inst.operands[0];
        let sig = sig_of(self.op_type(fp).as_ref()).map(str::to_string);
        let pb = self.val(fp)?;
        let (target, ctx) = (self.v(), self.v());
        self.fnidx_lookup(target, pb);
        self.alu(AluOp::And, target, target, !PAC_MASK);
        self.alu(AluOp::Lsr, SCRATCH, pb, PB_PAC_SHIFT as u64);
        self.alu(AluOp::And, SCRATCH, SCRATCH, 0x7f);
        self.alu(AluOp::Lsl, SCRATCH, SCRATCH, PAC_SHIFT as u64);
        self.emit(MInst::alu(AluOp::Orr, target, target, Src::Reg(SCRATCH)));
        if self.opts.compat_type_ctx {
            self.emit(MInst::MovImm { rd: ctx, imm: type_context(sig.as_deref().unwrap_or("")) });
        } else {
            self.alu(AluOp::And, ctx, pb, PB_ADDR_MASK);
            self.alu(AluOp::Lsl, ctx, ctx, 2);
            self.alu(AluOp::Orr, ctx, ctx, KERNEL_BASE);
        }
        self.pac_calls.insert(result.to_string(), (target, ctx));
        Ok(())
    }

    fn lower_pac_const(&mut self, inst: &Inst, r: Reg) -> Result<(), InstrumentError> {
        let x = &inst.operands[0];
        let sig = sig_of(inst.ty.as_ref()).or(sig_of(self.op_type(x).as_ref())).map(str::to_string);
        let src = self.val(x)?;
        let done = self.fresh_label();
        self.emit(MInst::Mov { rd: r, rn: src });
        self.alu(AluOp::Lsr, SCRATCH, r, 52);
        self.emit(MInst::Cmp { rn: SCRATCH, src: Src::Imm(0xfff) });
        self.emit(MInst::BCond { cond: Cond::Ne, target: done.clone() });
        let idx = self.v();
        self.fnrev_lookup(idx, r);
        let ctx = self.v();
        let c = if self.opts.compat_type_ctx { type_context(sig.as_deref().unwrap_or("")) } else { CONST_CONTEXT };
        self.emit(MInst::MovImm { rd: ctx, imm: c });
        self.emit(MInst::Pacia { rd: r, rn: ctx });
        let k = self.v();
        self.pac_bits(k, r);
        self.pack(r, idx, k, None);
        self.items.push(Item::Label(done));
        Ok(())
    }

    fn args(&mut self, args: &[Operand]) -> Result<(), InstrumentError> {
        if args.len() > ARG_REGS as usize {
            return Err(self.err(format!("{} arguments exceed the argument registers", args.len())));
        }
        let regs = args.iter().map(|a| self.val(a)).collect::<Result<Vec<_>, _>>()?;
        for (k, r) in regs.into_iter().enumerate() {
            self.emit(MInst::Mov { rd: Reg::R(k as u8), rn: r });
        }
        Ok(())
    }

    fn call_result(&mut self, inst: &Inst) {
        if let Some(r) = &inst.result {
            let rd = self.local(r);
            self.emit(MInst::Mov { rd, rn: Reg::R(0) });
        }
    }

    /// Copies for phis of `succ` along the edge from `pred`, as a parallel move.
    fn phi_copies(&mut self, pred: &str, succ: &str) -> Result<Vec<MInst>, InstrumentError> {
        let Some(moves) = self.phi_moves.get(&(pred.to_string(), succ.to_string())).cloned() else {
            return Ok(Vec::new());
        };
        let start = self.items.len();
        let mut temps = Vec::new();
        for (_, op) in &moves {
            let r = self.val(op)?;
            let t = self.v();
            self.emit(MInst::Mov { rd: t, rn: r });
            temps.push(t);
        }
        for ((dst, _), t) in moves.iter().zip(temps) {
            let rd = self.local(dst);
            self.emit(MInst::Mov { rd, rn: t });
        }
        Ok(self
            .items
            .drain(start..)
            .filter_map(|i| match i {
                Item::Inst(i) => Some(i),
                Item::Label(_) => None,
            })
            .collect())
    }

    fn lower_inst(&mut self, block: &str, inst: &Inst) -> Result<(), InstrumentError> {
        let ops = &inst.operands;
        if let Some(stub) = inst.stub() {
            let result = inst.result.clone();
            let rd = result.as_deref().map(|r| self.local(r));
            match (stub, rd) {
                ("pac_store", _) => self.lower_pac_store(inst)?,
                ("pac_load", Some(r)) => self.lower_pac_load(inst, r)?,
                ("pac_call", _) => {
                    let name = result.ok_or_else(|| self.err("pac_call without a result"))?;
                    self.locals.remove(&name);
                    self.lower_pac_call(inst, &name)?;
                }
                ("pac_const", Some(r)) => self.lower_pac_const(inst, r)?,
                ("pb_restore", Some(r)) => {
                    let x = self.val(&ops[0])?;
                    self.fnidx_lookup(r, x);
                }
                ("pac_memcpy" | "pac_memmove", _) => {
                    self.args(ops)?;
                    let sys = if !self.opts.pa {
                        if stub == "pac_memcpy" {
                            Sys::Rawcpy
                        } else {
                            Sys::Rawmove
                        }
                    } else if stub == "pac_memcpy" {
                        Sys::Memcpy
                    } else {
                        Sys::Memmove
                    };
                    self.emit(MInst::Sys(sys));
                }
                _ => return Err(self.err(format!("@{stub} without a result"))),
            }
            return Ok(());
        }
        let result = inst.result.as_deref();
        match inst.opcode {
            Opcode::Load => {
                let addr = self.val(&ops[0])?;
                let rt = self.local(result.unwrap_or_default());
                if inst.ty == Some(Type::I32) {
                    self.emit(MInst::Ldrw { rt, rn: addr, off: 0 });
                } else {
                    self.emit(MInst::Ldr { rt, rn: addr, off: 0 });
                }
            }
            Opcode::Store => {
                let narrow = self.op_type(&ops[0]) == Some(Type::I32)
                    || self.op_type(&ops[1]).as_ref().and_then(Type::pointee) == Some(&Type::I32);
                let rt = self.val(&ops[0])?;
                let rn = self.val(&ops[1])?;
                if narrow {
                    self.emit(MInst::Strw { rt, rn, off: 0 });
                } else {
                    self.emit(MInst::Str { rt, rn, off: 0 });
                }
            }
            Opcode::Gep => {
                let base_ty = self.op_type(&ops[0]).ok_or_else(|| self.err("gep base has no type"))?;
                let idx = ops[1..]
                    .iter()
                    .map(|o| o.int().ok_or_else(|| self.err("gep index must be constant")))
                    .collect::<Result<Vec<_>, _>>()?;
                let info = self.layout.gep(&base_ty, &idx)?;
                let base = self.val(&ops[0])?;
                let rd = self.local(result.unwrap_or_default());
                self.emit(MInst::alu(AluOp::Add, rd, base, Src::Imm(info.offset)));
            }
            Opcode::Bitcast | Opcode::Mov => {
                let rn = self.val(&ops[0])?;
                let rd = self.local(result.unwrap_or_default());
                self.emit(MInst::Mov { rd, rn });
            }
            Opcode::Add | Opcode::Sub => {
                let rn = self.val(&ops[0])?;
                let src = self.src(&ops[1])?;
                let rd = self.local(result.unwrap_or_default());
                let op = if inst.opcode == Opcode::Add { AluOp::Add } else { AluOp::Sub };
                self.emit(MInst::alu(op, rd, rn, src));
            }
            Opcode::Icmp => {
                let rn = self.val(&ops[0])?;
                let src = self.src(&ops[1])?;
                let rd = self.local(result.unwrap_or_default());
                let cond = Cond::from_pred(inst.pred.ok_or_else(|| self.err("icmp without predicate"))?);
                self.emit(MInst::Cmp { rn, src });
                self.emit(MInst::Cset { rd, cond });
            }
            Opcode::Phi => {}
            Opcode::Call => {
                let callee = inst.callee.clone().unwrap_or_default();
                self.args(ops)?;
                self.emit(MInst::Bl { target: format!("@{callee}") });
                self.has_call = true;
                self.call_result(inst);
            }
            Opcode::CallPtr => {
                let callee = &ops[0];
                let decoded = callee.local().and_then(|l| self.pac_calls.get(l).copied());
                let plain = match decoded {
                    Some(_) => None,
                    None => Some(self.val(callee)?),
                };
                self.args(&ops[1..])?;
                match (decoded, plain) {
                    (Some((rn, rc)), _) => self.emit(MInst::Blraa { rn, rc }),
                    (None, Some(rn)) => self.emit(MInst::Blr { rn }),
                    (None, None) => unreachable!(),
                }
                self.has_call = true;
                self.call_result(inst);
            }
            Opcode::Memcpy | Opcode::Memmove => {
                self.args(ops)?;
                self.emit(MInst::Sys(if inst.opcode == Opcode::Memcpy { Sys::Rawcpy } else { Sys::Rawmove }));
            }
            Opcode::Ret => {
                if let Some(v) = ops.first() {
                    let r = self.val(v)?;
                    self.emit(MInst::Mov { rd: Reg::R(0), rn: r });
                }
                let target = self.ret_label();
                self.emit(MInst::B { target });
            }
            Opcode::Br => match ops.first() {
                None => {
                    let succ = &inst.targets[0];
                    for c in self.phi_copies(block, succ)? {
                        self.emit(c);
                    }
                    let target = self.block_label(succ);
                    self.emit(MInst::B { target });
                }
                Some(c) => {
                    let rn = self.val(c)?;
                    let mut labels = Vec::new();
                    for succ in &inst.targets[..2] {
                        let copies = self.phi_copies(block, succ)?;
                        if copies.is_empty() {
                            labels.push(self.block_label(succ));
                        } else {
                            let edge = self.fresh_label();
                            self.edges.push(Item::Label(edge.clone()));
                            self.edges.extend(copies.into_iter().map(Item::Inst));
                            self.edges.push(Item::Inst(MInst::B { target: self.block_label(succ) }));
                            labels.push(edge);
                        }
                    }
                    self.emit(MInst::Cmp { rn, src: Src::Imm(0) });
                    self.emit(MInst::BCond { cond: Cond::Ne, target: labels[0].clone() });
                    self.emit(MInst::B { target: labels[1].clone() });
                }
            },
            Opcode::Nop => self.emit(MInst::Nop),
        }
        Ok(())
    }

    fn run(mut self) -> Result<(Vec<Item>, bool), InstrumentError> {
        for b in &self.f.blocks {
            for inst in &b.insts {
                if inst.opcode == Opcode::Phi {
                    let r = inst.result.clone().unwrap_or_default();
                    for (op, pred) in inst.operands.iter().zip(&inst.targets) {
                        self.phi_moves
                            .entry((pred.clone(), b.label.clone()))
                            .or_default()
                            .push((r.clone(), op.clone()));
                    }
                }
            }
        }
        let params: Vec<String> = self.f.params.iter().map(|(n, _)| n.clone()).collect();
        if params.len() > ARG_REGS as usize {
            return Err(self.err("too many parameters"));
        }
        for (k, p) in params.iter().enumerate() {
            let rd = self.local(p);
            self.emit(MInst::Mov { rd, rn: Reg::R(k as u8) });
        }
        for b in &self.f.blocks {
            self.items.push(Item::Label(self.block_label(&b.label)));
            for inst in &b.insts {
                self.lower_inst(&b.label, inst)?;
            }
        }
        let mut items = std::mem::take(&mut self.items);
        items.append(&mut self.edges);
        items.push(Item::Label(self.ret_label()));
        Ok((drop_fallthrough_branches(items), self.has_call))
    }
}

/// Removes `b L` when `L` is the very next label.
fn drop_fallthrough_branches(items: Vec<Item>) -> Vec<Item> {
    let mut out = Vec::with_capacity(items.len());
    for (k, item) in items.iter().enumerate() {
        if let Item::Inst(MInst::B { target }) = item {
            let next_labels = items[k + 1..].iter().map_while(|i| match i {
                Item::Label(l) => Some(l),
                Item::Inst(_) => None,
            });
            if next_labels.into_iter().any(|l| l == target) {
                continue;
            }
        }
        out.push(item.clone());
    }
    out
}

fn frame_code(saves: &[Reg], store: bool) -> Vec<MInst> {
    let mut out = Vec::new();
    for (k, pair) in saves.chunks(2).enumerate() {
        let off = 16 * k as i64;
        out.push(match (pair, store) {
            ([a, b], true) => MInst::Stp { rt1: *a, rt2: *b, rn: Reg::Sp, off },
            ([a, b], false) => MInst::Ldp { rt1: *a, rt2: *b, rn: Reg::Sp, off },
            ([a], true) => MInst::Str { rt: *a, rn: Reg::Sp, off },
            ([a], false) => MInst::Ldr { rt: *a, rn: Reg::Sp, off },
            _ => unreachable!(),
        });
    }
    out
}

fn lower_function(
    m: &Module,
    layout: &Layout<'_>,
    f: &Function,
    opts: BuildOptions,
) -> Result<Vec<Item>, InstrumentError> {
    let types = ValueTypes::compute(m, layout, f)?;
    let fl = FnLower {
        m,
        layout,
        types,
        f,
        opts,
        items: Vec::new(),
        locals: HashMap::new(),
        pac_calls: HashMap::new(),
        phi_moves: HashMap::new(),
        edges: Vec::new(),
        next_v: 0,
        next_label: 0,
        has_call: false,
    };
    let (vcode, has_call) = fl.run()?;
    let (body, used) =
        allocate(&vcode).map_err(|live| InstrumentError::RegisterPressure { function: f.name.clone(), live })?;
    let mut saves = Vec::new();
    if has_call {
        saves.push(Reg::Lr);
    }
    saves.extend(used);
    let frame = (8 * saves.len() as u64).next_multiple_of(16);
    let sign = has_call && opts.pa;
    let mut out = vec![Item::Label(format!("@{}", f.name))];
    let mut pro = Vec::new();
    if sign {
        pro.push(MInst::Paciasp);
    }
    if frame > 0 {
        pro.push(MInst::alu(AluOp::Sub, Reg::Sp, Reg::Sp, Src::Imm(frame as i64)));
    }
    pro.extend(frame_code(&saves, true));
    out.extend(pro.into_iter().map(Item::Inst));
    out.extend(body);
    let mut epi = frame_code(&saves, false);
    if frame > 0 {
        epi.push(MInst::alu(AluOp::Add, Reg::Sp, Reg::Sp, Src::Imm(frame as i64)));
    }
    match (sign, opts.legacy_ret) {
        (true, false) => epi.push(MInst::Retaa),
        (true, true) => epi.extend([MInst::Autiasp, MInst::Ret]),
        (false, _) => epi.push(MInst::Ret),
    }
    out.extend(epi.into_iter().map(Item::Inst));
    Ok(out)
}

/// Lowers a (possibly instrumented) module to a machine program.
pub fn lower(m: &Module, patches: &[PatchRecord], opts: BuildOptions) -> Result<MachineProgram, InstrumentError> {
    let layout = Layout::new(m);
    let data = build_data(m, &layout)?;
    if m.function("main").is_none() {
        return Err(InstrumentError::Unsupported { function: "main".into(), msg: "no entry function".into() });
    }
    let mut text = Vec::new();
    let mut labels = BTreeMap::new();
    let mut init_text = Vec::new();
    let mut place = |items: Vec<Item>, text: &mut Vec<MInst>| {
        for item in items {
            match item {
                Item::Label(l) => {
                    labels.insert(l, text.len());
                }
                Item::Inst(i) => text.push(i),
            }
        }
    };
    let mut boot = vec![Item::Label("@__boot".into())];
    if m.function("start_kernel").is_some() {
        boot.push(Item::Inst(MInst::Bl { target: "@start_kernel".into() }));
    }
    if opts.pa {
        boot.push(Item::Inst(MInst::Sys(Sys::PaInit)));
    }
    if m.functions.iter().any(|f| f.init_text) {
        boot.push(Item::Inst(MInst::Sys(Sys::FreeInit)));
    }
    boot.push(Item::Inst(MInst::Bl { target: "@main".into() }));
    boot.push(Item::Inst(MInst::Halt));
    place(boot, &mut text);
    for f in &m.functions {
        let start = text.len();
        place(lower_function(m, &layout, f, opts)?, &mut text);
        if f.init_text {
            init_text.push((start, text.len()));
        }
    }
    let patches = if opts.pa { patches.to_vec() } else { Vec::new() };
    let p = MachineProgram {
        text,
        labels,
        data,
        fnidx: m.address_taken.iter().cloned().collect(),
        patches,
        init_text,
        opts,
    };
    p.check().map_err(|e| InstrumentError::Unsupported { function: "<object>".into(), msg: e.to_string() })?;
    Ok(p)
}
