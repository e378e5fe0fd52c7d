//! Deterministic simulator of the toy PA-capable machine.

mod memory;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, classify, FnIndexTable, Key128, PointerClass, PointerWord};
use crate::instrument::{type_context, MachineProgram, ObjectError};
use crate::isa::memmap::{
    self, DATA_BASE, FNIDX_BASE, FNREV_BASE, IRQ_FRAME, IRQ_FRAME_WORDS, IRQ_TAG_SLOT, STACK_SIZE, STACK_TOP, TEXT_BASE,
};
use crate::isa::{MInst, Reg, Sys};

pub use memory::Memory;

/// Default instruction budget for a run.
pub const DEFAULT_FUEL: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "addr")]
pub enum TrapKind {
    TranslationFault(u64),
    AuthFailureDeref(u64),
    UndefinedInstruction,
    ExecuteFreedInit,
    Halt,
}

impl TrapKind {
    pub fn name(self) -> &'static str {
        match self {
            TrapKind::TranslationFault(_) => "TranslationFault",
            TrapKind::AuthFailureDeref(_) => "AuthFailureDeref",
            TrapKind::UndefinedInstruction => "UndefinedInstruction",
            TrapKind::ExecuteFreedInit => "ExecuteFreedInit",
            TrapKind::Halt => "Halt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("trap during boot: {0:?}")]
    BootTrap(TrapKind),
    #[error("fuel exhausted after {retired} instructions")]
    FuelExhausted { retired: u64 },
    #[error(transparent)]
    Object(#[from] ObjectError),
}

/// Run-time switches that are not part of the program image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    /// Execute PA instructions as plain moves and branches.
    pub pa_off: bool,
    /// Use an unguarded interrupt spill even in builds that guard it.
    pub plain_irq: bool,
    /// Record trace events.
    pub trace: bool,
}

/// One line of the JSON trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub retired: u64,
    pub event: String,
    pub pc: u64,
    pub detail: String,
}

/// Program image with resolved references, shared between snapshots.
#[derive(Debug)]
struct Image {
    program: MachineProgram,
    fnidx: FnIndexTable,
    /// Per instruction: branch target or `adrp` address, else 0.
    resolved: Vec<u64>,
    init_ranges: Vec<(u64, u64)>,
    main_call: u64,
}

#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: [u64; 29],
    pub lr: u64,
    pub sp: u64,
    pub pc: u64,
    /// Operands of the last `cmp`.
    pub flags: (u64, u64),
    pub mem: Memory,
    pub key_ia: Key128,
    pub key_ib: Key128,
    pub pa_ready: bool,
    /// `(address, context)` of stores made before keys were set.
    pub prekey_patch_list: Vec<(u64, u64)>,
    /// Records taken from `prekey_patch_list` at key setup.
    pub prekey_consumed: usize,
    pub trap: Option<TrapKind>,
    pub retired: u64,
    pub inittext_freed: bool,
    pub config: MachineConfig,
    pub trace: Vec<TraceEvent>,
    seed: u64,
    image: Arc<Image>,
}

fn resolve(p: &MachineProgram) -> Result<Vec<u64>, ObjectError> {
    p.text
        .iter()
        .map(|inst| match inst {
            MInst::B { target } | MInst::BCond { target, .. } | MInst::Bl { target } => {
                p.label_addr(target).ok_or_else(|| ObjectError::Unresolved(target.clone()))
            }
            MInst::Adrp { sym, .. } => p.symbol_addr(sym).ok_or_else(|| ObjectError::Unresolved(sym.clone())),
            _ => Ok(0),
        })
        .collect()
}

impl MachineState {
    /// Maps the program images and positions the machine at the boot stub.
    pub fn load(p: &MachineProgram, seed: u64, config: MachineConfig) -> Result<MachineState, MachineError> {
        p.check()?;
        let fnidx = p.fn_index_table()?;
        let resolved = resolve(p)?;
        let mut mem = Memory::default();
        mem.map("data", DATA_BASE, p.data.bytes.len().max(8) as u64);
        mem.write(DATA_BASE, &p.data.bytes).expect("data fits");
        for r in &p.data.relocs {
            let addr = p.symbol_addr(&r.symbol).ok_or_else(|| ObjectError::Unresolved(r.symbol.clone()))?;
            mem.write_u64(DATA_BASE + r.offset, addr).map_err(|_| ObjectError::BadPatch(r.symbol.clone(), r.offset))?;
        }
        mem.map("fnidx", FNIDX_BASE, 8 * (fnidx.len() as u64 + 1));
        for (index, _, addr) in fnidx.iter() {
            mem.write_u64(FNIDX_BASE + 8 * index.get() as u64, addr).expect("fnidx fits");
        }
        mem.map("fnrev", FNREV_BASE, 4 * p.text.len().max(1) as u64);
        for (index, _, addr) in fnidx.iter() {
            mem.write_u32(FNREV_BASE + (addr - TEXT_BASE), u32::from(index.get())).expect("fnrev fits");
        }
        mem.map("stack", STACK_TOP - STACK_SIZE, STACK_SIZE);
        mem.map("irq", IRQ_FRAME, 8 * IRQ_FRAME_WORDS);
        let entry = p.label_addr("@__boot").ok_or_else(|| ObjectError::Unresolved("@__boot".into()))?;
        let boot = p.functions().into_iter().find(|f| f.name == "__boot");
        let main_call = boot
            .and_then(|b| (b.start..b.end).find(|&i| matches!(&p.text[i], MInst::Bl { target } if target == "@main")))
            .map(memmap::text_addr)
            .ok_or_else(|| ObjectError::Unresolved("@main".into()))?;
        let init_ranges = p.init_text.iter().map(|&(a, b)| (memmap::text_addr(a), memmap::text_addr(b))).collect();
        Ok(MachineState {
            regs: [0; 29],
            lr: 0,
            sp: STACK_TOP,
            pc: entry,
            flags: (0, 0),
            mem,
            key_ia: Key128::default(),
            key_ib: Key128::default(),
            pa_ready: false,
            prekey_patch_list: Vec::new(),
            prekey_consumed: 0,
            trap: None,
            retired: 0,
            inittext_freed: false,
            config,
            trace: Vec::new(),
            seed,
            image: Arc::new(Image { program: p.clone(), fnidx, resolved, init_ranges, main_call }),
        })
    }

    pub fn program(&self) -> &MachineProgram {
        &self.image.program
    }

    pub fn fnidx(&self) -> &FnIndexTable {
        &self.image.fnidx
    }

    pub fn symbol_addr(&self, sym: &str) -> Option<u64> {
        self.image.program.symbol_addr(sym)
    }

    /// Whether PA instructions currently check and sign.
    pub fn pa_active(&self) -> bool {
        self.pa_ready && !self.config.pa_off
    }

    /// Whether the interrupt spill frame carries an integrity tag.
    pub fn irq_guarded(&self) -> bool {
        let o = &self.image.program.opts;
        o.pa && !o.legacy_ret && self.pa_active() && !self.config.plain_irq
    }

    /// Index of the instruction at `pc`, if `pc` is inside the text image.
    pub fn text_index(&self, pc: u64) -> Option<usize> {
        let off = pc.checked_sub(TEXT_BASE)?;
        let idx = (off / 4) as usize;
        (off % 4 == 0 && idx < self.image.program.text.len()).then_some(idx)
    }

    /// Address of the boot stub's call into `main`.
    pub fn main_call_site(&self) -> u64 {
        self.image.main_call
    }

    pub fn reg(&self, r: Reg) -> u64 {
        match r {
            Reg::R(n) => self.regs[n as usize],
            Reg::Lr => self.lr,
            Reg::Sp => self.sp,
            Reg::V(_) => 0,
        }
    }

    fn set_reg(&mut self, r: Reg, v: u64) -> Result<(), TrapKind> {
        match r {
            Reg::R(n) => self.regs[n as usize] = v,
            Reg::Lr => self.lr = v,
            Reg::Sp => self.sp = v,
            Reg::V(_) => return Err(TrapKind::UndefinedInstruction),
        }
        Ok(())
    }

    fn event(&mut self, event: &str, detail: String) {
        if self.config.trace {
            self.trace.push(TraceEvent { retired: self.retired, event: event.to_string(), pc: self.pc, detail });
        }
    }

    fn auth(&self, word: u64, ctx: u64) -> u64 {
        codec::authenticate(self.key_ia, PointerWord(word), ctx).0
    }

    fn sign(&self, word: u64, ctx: u64) -> u64 {
        match codec::sign(self.key_ia, PointerWord(word), ctx) {
            Ok(w) => w.0,
            Err(_) => codec::poison(PointerWord(word)).0,
        }
    }

    /// Authenticated indirect target, or the fault to raise.
    fn checked_target(&self, word: u64, ctx: u64) -> Result<u64, TrapKind> {
        if !self.pa_active() {
            return Ok(word);
        }
        let v = self.auth(word, ctx);
        if classify(v) == PointerClass::RawKernel {
            Ok(v)
        } else {
            Err(TrapKind::AuthFailureDeref(v))
        }
    }

    /// Effective address; a poisoned base is an authentication failure.
    fn ea(&self, base: u64, off: i64) -> Result<u64, TrapKind> {
        if classify(base) == PointerClass::Poisoned {
            Err(TrapKind::AuthFailureDeref(base))
        } else {
            Ok(base.wrapping_add(off as u64))
        }
    }

    fn load_u64(&self, addr: u64) -> Result<u64, TrapKind> {
        self.mem.read_u64(addr).map_err(TrapKind::TranslationFault)
    }

    fn store_u64(&mut self, addr: u64, v: u64) -> Result<(), TrapKind> {
        self.mem.write_u64(addr, v).map_err(TrapKind::TranslationFault)
    }

    fn pa_init(&mut self) -> Result<(), TrapKind> {
        self.prekey_consumed = self.prekey_patch_list.len();
        if self.config.pa_off {
            self.pa_ready = true;
            self.prekey_patch_list.clear();
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.key_ia = Key128::new(rng.next_u64(), rng.next_u64());
        self.key_ib = Key128::new(rng.next_u64(), rng.next_u64());
        self.pa_ready = true;
        let image = Arc::clone(&self.image);
        let p = &image.program;
        let mut cells: Vec<(u64, u64)> = Vec::new();
        for rec in &p.patches {
            let sym = p.data.symbol(&rec.global).expect("checked patch");
            let addr = DATA_BASE + sym.offset + rec.offset;
            let ctx = if p.opts.compat_type_ctx { type_context(rec.sig.as_deref().unwrap_or("")) } else { addr };
            cells.push((addr, ctx));
        }
        cells.append(&mut self.prekey_patch_list);
        for (addr, ctx) in cells {
            let w = self.load_u64(addr)?;
            if classify(w) == PointerClass::RawKernel {
                let signed = self.sign(w, ctx);
                self.store_u64(addr, signed)?;
            }
        }
        Ok(())
    }

    /// Copies `len` bytes; with `resign`, function pointers landing in the
    /// destination are re-bound to their new address.
    fn copy(&mut self, dst: u64, src: u64, len: u64, resign: bool) -> Result<(), TrapKind> {
        let bytes = self.mem.read(src, len).map_err(TrapKind::TranslationFault)?.to_vec();
        self.mem.write(dst, &bytes).map_err(TrapKind::TranslationFault)?;
        let compat = self.image.program.opts.compat_type_ctx;
        if !resign || !self.pa_active() || compat {
            return Ok(());
        }
        let first = dst.next_multiple_of(8);
        let mut at = first;
        while at + 8 <= dst + len {
            let k = (at - dst) as usize;
            let w = u64::from_le_bytes(bytes[k..k + 8].try_into().unwrap());
            if codec::match_paced_fp(&self.image.fnidx, w) {
                let raw = self.auth(w, src + k as u64);
                let out = if classify(raw) == PointerClass::RawKernel { self.sign(raw, at) } else { raw };
                self.store_u64(at, out)?;
            }
            at += 8;
        }
        Ok(())
    }

    fn exec(&mut self, idx: usize) -> Result<u64, TrapKind> {
        let image = Arc::clone(&self.image);
        let inst = &image.program.text[idx];
        let target = image.resolved[idx];
        let next = self.pc + 4;
        let r = |s: &Self, r: &Reg| s.reg(*r);
        match inst {
            MInst::Ldr { rt, rn, off } => {
                let v = self.load_u64(self.ea(r(self, rn), *off)?)?;
                self.set_reg(*rt, v)?;
            }
            MInst::Ldrw { rt, rn, off } => {
                let a = self.ea(r(self, rn), *off)?;
                let v = self.mem.read_u32(a).map_err(TrapKind::TranslationFault)?;
                self.set_reg(*rt, v as u64)?;
            }
            MInst::Str { rt, rn, off } => {
                let a = self.ea(r(self, rn), *off)?;
                self.store_u64(a, r(self, rt))?;
            }
            MInst::Strw { rt, rn, off } => {
                let a = self.ea(r(self, rn), *off)?;
                self.mem.write_u32(a, r(self, rt) as u32).map_err(TrapKind::TranslationFault)?;
            }
            MInst::Ldp { rt1, rt2, rn, off } => {
                let a = self.ea(r(self, rn), *off)?;
                let (v1, v2) = (self.load_u64(a)?, self.load_u64(a + 8)?);
                self.set_reg(*rt1, v1)?;
                self.set_reg(*rt2, v2)?;
            }
            MInst::Stp { rt1, rt2, rn, off } => {
                let a = self.ea(r(self, rn), *off)?;
                self.store_u64(a, r(self, rt1))?;
                self.store_u64(a + 8, r(self, rt2))?;
            }
            MInst::Mov { rd, rn } => self.set_reg(*rd, r(self, rn))?,
            MInst::MovImm { rd, imm } => self.set_reg(*rd, *imm)?,
            MInst::Alu { op, rd, rn, src } => {
                let b = match src {
                    crate::isa::Src::Reg(x) => r(self, x),
                    crate::isa::Src::Imm(i) => *i as u64,
                };
                self.set_reg(*rd, op.apply(r(self, rn), b))?;
            }
            MInst::Cmp { rn, src } => {
                let b = match src {
                    crate::isa::Src::Reg(x) => r(self, x),
                    crate::isa::Src::Imm(i) => *i as u64,
                };
                self.flags = (r(self, rn), b);
            }
            MInst::Cset { rd, cond } => self.set_reg(*rd, cond.holds(self.flags.0, self.flags.1) as u64)?,
            MInst::B { .. } => return Ok(target),
            MInst::BCond { cond, .. } => {
                return Ok(if cond.holds(self.flags.0, self.flags.1) { target } else { next });
            }
            MInst::Bl { .. } => {
                self.lr = next;
                self.event("call", format!("{target:#x}"));
                return Ok(target);
            }
            MInst::Blr { rn } => {
                let t = r(self, rn);
                self.lr = next;
                self.event("call", format!("{t:#x}"));
                return Ok(t);
            }
            MInst::Blraa { rn, rc } => {
                let t = self.checked_target(r(self, rn), r(self, rc))?;
                self.lr = next;
                self.event("call", format!("{t:#x}"));
                return Ok(t);
            }
            MInst::Ret => {
                self.event("ret", format!("{:#x}", self.lr));
                return Ok(self.lr);
            }
            MInst::Retaa => {
                let t = self.checked_target(self.lr, self.sp)?;
                self.event("ret", format!("{t:#x}"));
                return Ok(t);
            }
            MInst::Pacia { rd, rn } => {
                if self.pa_active() {
                    let v = self.sign(r(self, rd), r(self, rn));
                    self.set_reg(*rd, v)?;
                }
            }
            MInst::Autia { rd, rn } => {
                if self.pa_active() {
                    let v = self.auth(r(self, rd), r(self, rn));
                    self.set_reg(*rd, v)?;
                }
            }
            MInst::Paciasp => {
                if self.pa_active() {
                    self.lr = self.sign(self.lr, self.sp);
                }
            }
            MInst::Autiasp => {
                if self.pa_active() {
                    self.lr = self.auth(self.lr, self.sp);
                }
            }
            MInst::Adrp { rd, .. } => self.set_reg(*rd, target)?,
            MInst::Nop => {}
            MInst::Halt => return Err(TrapKind::Halt),
            MInst::SysPrekey { rn, rc } => {
                if !self.pa_ready {
                    let entry = (r(self, rn), r(self, rc));
                    self.prekey_patch_list.push(entry);
                }
            }
            MInst::Sys(sys) => {
                let (d, s, n) = (self.regs[0], self.regs[1], self.regs[2]);
                match sys {
                    Sys::PaInit => self.pa_init()?,
                    Sys::FreeInit => self.inittext_freed = true,
                    Sys::Memcpy | Sys::Memmove => self.copy(d, s, n, true)?,
                    Sys::Rawcpy | Sys::Rawmove => self.copy(d, s, n, false)?,
                }
                self.event("sys", sys.name().to_string());
            }
        }
        Ok(next)
    }

    /// Executes one instruction; a trap stops the machine.
    pub fn step(&mut self) {
        if self.trap.is_some() {
            return;
        }
        let pc = self.pc;
        let result = match self.text_index(pc) {
            None => Err(TrapKind::TranslationFault(pc)),
            Some(_) if self.inittext_freed && self.image.init_ranges.iter().any(|&(a, b)| (a..b).contains(&pc)) => {
                Err(TrapKind::ExecuteFreedInit)
            }
            Some(idx) => self.exec(idx),
        };
        match result {
            Ok(next) => {
                self.pc = next;
                self.retired += 1;
            }
            Err(t) => {
                self.trap = Some(t);
                self.event("trap", format!("{t:?}"));
            }
        }
    }

    /// Steps until a trap (including `halt`) or until `fuel` runs out.
    pub fn run(&mut self, fuel: u64) -> Result<(), MachineError> {
        let mut left = fuel;
        while self.trap.is_none() {
            if left == 0 {
                return Err(MachineError::FuelExhausted { retired: self.retired });
            }
            self.step();
            left -= 1;
        }
        Ok(())
    }

    /// True when execution ended at `halt`.
    pub fn halted(&self) -> bool {
        self.trap == Some(TrapKind::Halt)
    }

    fn frame_tag(&self) -> u64 {
        let mut h = 0u64;
        for i in 0..IRQ_FRAME_WORDS - 1 {
            let w = self.mem.read_u64(IRQ_FRAME + 8 * i).unwrap_or(0);
            h = codec::prf(self.key_ib, w ^ h, IRQ_FRAME + 8 * i);
        }
        h
    }

    /// Takes an interrupt at the current instruction boundary: registers are
    /// spilled to the interrupt frame, `during` runs with the frame in
    /// memory, and registers are reloaded from it.
    pub fn inject_interrupt(&mut self, during: impl FnOnce(&mut Memory)) {
        if self.trap.is_some() {
            return;
        }
        for i in 0..29 {
            self.mem.write_u64(IRQ_FRAME + 8 * i as u64, self.regs[i]).expect("irq frame mapped");
        }
        self.mem.write_u64(memmap::IRQ_LR_SLOT, self.lr).expect("irq frame mapped");
        let guarded = self.irq_guarded();
        if guarded {
            let tag = self.frame_tag();
            self.mem.write_u64(IRQ_TAG_SLOT, tag).expect("irq frame mapped");
        }
        self.event("irq", String::new());
        during(&mut self.mem);
        if guarded && self.mem.read_u64(IRQ_TAG_SLOT).ok() != Some(self.frame_tag()) {
            self.trap = Some(TrapKind::AuthFailureDeref(IRQ_FRAME));
            self.event("trap", "interrupt frame tampered".into());
            return;
        }
        for i in 0..29 {
            self.regs[i] = self.mem.read_u64(IRQ_FRAME + 8 * i as u64).expect("irq frame mapped");
        }
        self.lr = self.mem.read_u64(memmap::IRQ_LR_SLOT).expect("irq frame mapped");
    }

    /// Values of the observable output globals (`out*`).
    pub fn output_cells(&self) -> BTreeMap<String, u64> {
        let p = &self.image.program;
        p.data
            .symbols
            .iter()
            .filter(|s| s.name.starts_with("out"))
            .map(|s| {
                let addr = DATA_BASE + s.offset;
                let v = if s.size == 4 {
                    self.mem.read_u32(addr).map(u64::from).unwrap_or(0)
                } else {
                    self.mem.read_u64(addr).unwrap_or(0)
                };
                (s.name.clone(), v)
            })
            .collect()
    }

    /// Trace as line-delimited JSON.
    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
    }
}

/// Loads `p` and runs the boot protocol up to the call into `main`.
pub fn boot(p: &MachineProgram, seed: u64) -> Result<MachineState, MachineError> {
    boot_with(p, seed, MachineConfig::default())
}

pub fn boot_with(p: &MachineProgram, seed: u64, config: MachineConfig) -> Result<MachineState, MachineError> {
    let mut s = MachineState::load(p, seed, config)?;
    let stop = s.main_call_site();
    let mut fuel = DEFAULT_FUEL;
    while s.pc != stop {
        if let Some(t) = s.trap {
            return Err(MachineError::BootTrap(t));
        }
        if fuel == 0 {
            return Err(MachineError::FuelExhausted { retired: s.retired });
        }
        s.step();
        fuel -= 1;
    }
    Ok(s)
}

/// Boots and runs `p` to completion.
pub fn run_program(
    p: &MachineProgram,
    seed: u64,
    config: MachineConfig,
    fuel: u64,
) -> Result<MachineState, MachineError> {
    let mut s = boot_with(p, seed, config)?;
    s.run(fuel)?;
    Ok(s)
}
