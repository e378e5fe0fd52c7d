//! Toy PA-capable instruction set shared by the lowering pass and the
//! simulator.

use std::fmt;
use std::str::FromStr;

use crate::codec::KERNEL_BASE;
use crate::ir::Pred;

/// Simulated memory map.
pub mod memmap {
    use super::KERNEL_BASE;

    /// Text image; each instruction occupies 4 bytes.
    pub const TEXT_BASE: u64 = KERNEL_BASE + 0x10_0000;
    /// Function index table: entry `i` (8 bytes) is the raw address of the
    /// function with index `i`; entry 0 is zero.
    pub const FNIDX_BASE: u64 = KERNEL_BASE + 0x40_0000;
    /// Reverse index: one 4-byte entry per text instruction holding the
    /// function index of a registered entry point, or zero. The entry for
    /// text address `a` sits at `a + FNREV_DELTA`.
    pub const FNREV_BASE: u64 = KERNEL_BASE + 0x50_0000;
    pub const FNREV_DELTA: u64 = FNREV_BASE - TEXT_BASE;
    pub const DATA_BASE: u64 = KERNEL_BASE + 0x80_0000;
    pub const STACK_TOP: u64 = KERNEL_BASE + 0x100_0000;
    pub const STACK_SIZE: u64 = 0x1_0000;
    /// Interrupt spill frame: r0..=r28 at `8*i`, lr at `8*29`, guard tag at
    /// `8*30`.
    pub const IRQ_FRAME: u64 = KERNEL_BASE + 0x110_0000;
    pub const IRQ_FRAME_WORDS: u64 = 31;
    pub const IRQ_LR_SLOT: u64 = IRQ_FRAME + 8 * 29;
    pub const IRQ_TAG_SLOT: u64 = IRQ_FRAME + 8 * 30;

    pub fn text_addr(index: usize) -> u64 {
        TEXT_BASE + 4 * index as u64
    }
}

/// Argument registers r0..=r3; r0 also carries the return value.
pub const ARG_REGS: u8 = 4;
/// First and last allocatable (callee-saved) register.
pub const POOL_FIRST: u8 = 4;
pub const POOL_LAST: u8 = 27;
/// Scratch register used inside expanded stub sequences.
pub const SCRATCH: Reg = Reg::R(28);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    R(u8),
    Lr,
    Sp,
    /// Virtual register, only present before allocation.
    V(u32),
}

impl Reg {
    pub fn is_virtual(self) -> bool {
        matches!(self, Reg::V(_))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::R(n) => write!(f, "r{n}"),
            Reg::Lr => f.write_str("lr"),
            Reg::Sp => f.write_str("sp"),
            Reg::V(n) => write!(f, "v{n}"),
        }
    }
}

impl FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> Result<Reg, String> {
        let num = |t: &str| t.parse::<u32>().map_err(|_| format!("bad register `{s}`"));
        match s {
            "lr" => Ok(Reg::Lr),
            "sp" => Ok(Reg::Sp),
            _ if s.starts_with('r') => {
                let n = num(&s[1..])?;
                if n > 28 {
                    return Err(format!("bad register `{s}`"));
                }
                Ok(Reg::R(n as u8))
            }
            _ if s.starts_with('v') => Ok(Reg::V(num(&s[1..])?)),
            _ => Err(format!("bad register `{s}`")),
        }
    }
}

/// Second operand of arithmetic and compare instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Src {
    Reg(Reg),
    Imm(i64),
}

impl fmt::Display for Src {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Src::Reg(r) => write!(f, "{r}"),
            Src::Imm(v) if *v < 0 => write!(f, "#{v}"),
            Src::Imm(v) => write!(f, "#{v:#x}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Lo,
    Hi,
}

impl Cond {
    pub fn from_pred(p: Pred) -> Cond {
        match p {
            Pred::Eq => Cond::Eq,
            Pred::Ne => Cond::Ne,
            Pred::Slt => Cond::Lt,
            Pred::Sle => Cond::Le,
            Pred::Sgt => Cond::Gt,
            Pred::Sge => Cond::Ge,
            Pred::Ult => Cond::Lo,
            Pred::Ugt => Cond::Hi,
        }
    }

    pub fn holds(self, a: u64, b: u64) -> bool {
        let (sa, sb) = (a as i64, b as i64);
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => sa < sb,
            Cond::Le => sa <= sb,
            Cond::Gt => sa > sb,
            Cond::Ge => sa >= sb,
            Cond::Lo => a < b,
            Cond::Hi => a > b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Le => "le",
            Cond::Gt => "gt",
            Cond::Ge => "ge",
            Cond::Lo => "lo",
            Cond::Hi => "hi",
        }
    }

    fn from_name(s: &str) -> Option<Cond> {
        Some(match s {
            "eq" => Cond::Eq,
            "ne" => Cond::Ne,
            "lt" => Cond::Lt,
            "le" => Cond::Le,
            "gt" => Cond::Gt,
            "ge" => Cond::Ge,
            "lo" => Cond::Lo,
            "hi" => Cond::Hi,
            _ => return None,
        })
    }
}

/// Binary register-register-or-immediate operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Orr,
    Lsl,
    Lsr,
}

impl AluOp {
    pub fn name(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::And => "and",
            AluOp::Orr => "orr",
            AluOp::Lsl => "lsl",
            AluOp::Lsr => "lsr",
        }
    }

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Orr => a | b,
            AluOp::Lsl => a.checked_shl(b as u32).unwrap_or(0),
            AluOp::Lsr => a.checked_shr(b as u32).unwrap_or(0),
        }
    }
}

/// Runtime services implemented natively by the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sys {
    /// Seed the PA keys, sign every patch record and pre-key store.
    PaInit,
    /// Unmap boot-only text.
    FreeInit,
    /// Copy r2 bytes from r1 to r0, re-signing function pointers found in the
    /// destination.
    Memcpy,
    Memmove,
    /// Plain byte copies.
    Rawcpy,
    Rawmove,
}

impl Sys {
    pub fn name(self) -> &'static str {
        match self {
            Sys::PaInit => "sys_pa_init",
            Sys::FreeInit => "sys_free_init",
            Sys::Memcpy => "sys_memcpy",
            Sys::Memmove => "sys_memmove",
            Sys::Rawcpy => "sys_rawcpy",
            Sys::Rawmove => "sys_rawmove",
        }
    }

    fn from_name(s: &str) -> Option<Sys> {
        Some(match s {
            "sys_pa_init" => Sys::PaInit,
            "sys_free_init" => Sys::FreeInit,
            "sys_memcpy" => Sys::Memcpy,
            "sys_memmove" => Sys::Memmove,
            "sys_rawcpy" => Sys::Rawcpy,
            "sys_rawmove" => Sys::Rawmove,
            _ => return None,
        })
    }

    /// Argument registers consumed.
    pub fn arity(self) -> u8 {
        match self {
            Sys::PaInit | Sys::FreeInit => 0,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MInst {
    Ldr {
        rt: Reg,
        rn: Reg,
        off: i64,
    },
    Str {
        rt: Reg,
        rn: Reg,
        off: i64,
    },
    /// 32-bit zero-extending load and truncating store.
    Ldrw {
        rt: Reg,
        rn: Reg,
        off: i64,
    },
    Strw {
        rt: Reg,
        rn: Reg,
        off: i64,
    },
    Ldp {
        rt1: Reg,
        rt2: Reg,
        rn: Reg,
        off: i64,
    },
    Stp {
        rt1: Reg,
        rt2: Reg,
        rn: Reg,
        off: i64,
    },
    Mov {
        rd: Reg,
        rn: Reg,
    },
    MovImm {
        rd: Reg,
        imm: u64,
    },
    Alu {
        op: AluOp,
        rd: Reg,
        rn: Reg,
        src: Src,
    },
    Cmp {
        rn: Reg,
        src: Src,
    },
    Cset {
        rd: Reg,
        cond: Cond,
    },
    B {
        target: String,
    },
    BCond {
        cond: Cond,
        target: String,
    },
    Bl {
        target: String,
    },
    Blr {
        rn: Reg,
    },
    Blraa {
        rn: Reg,
        rc: Reg,
    },
    Ret,
    Retaa,
    Pacia {
        rd: Reg,
        rn: Reg,
    },
    Autia {
        rd: Reg,
        rn: Reg,
    },
    Paciasp,
    Autiasp,
    /// Absolute address of a data or text symbol.
    Adrp {
        rd: Reg,
        sym: String,
    },
    Nop,
    Halt,
    Sys(Sys),
    /// Record `rn` (with context `rc`) for signing at PA init; no effect once
    /// keys are set.
    SysPrekey {
        rn: Reg,
        rc: Reg,
    },
}

impl MInst {
    pub fn alu(op: AluOp, rd: Reg, rn: Reg, src: Src) -> MInst {
        MInst::Alu { op, rd, rn, src }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            MInst::Ldr { .. } => "ldr",
            MInst::Str { .. } => "str",
            MInst::Ldrw { .. } => "ldrw",
            MInst::Strw { .. } => "strw",
            MInst::Ldp { .. } => "ldp",
            MInst::Stp { .. } => "stp",
            MInst::Mov { .. } => "mov",
            MInst::MovImm { .. } => "movimm",
            MInst::Alu { op, .. } => op.name(),
            MInst::Cmp { .. } => "cmp",
            MInst::Cset { .. } => "cset",
            MInst::B { .. } => "b",
            MInst::BCond { .. } => "b.cond",
            MInst::Bl { .. } => "bl",
            MInst::Blr { .. } => "blr",
            MInst::Blraa { .. } => "blraa",
            MInst::Ret => "ret",
            MInst::Retaa => "retaa",
            MInst::Pacia { .. } => "pacia",
            MInst::Autia { .. } => "autia",
            MInst::Paciasp => "paciasp",
            MInst::Autiasp => "autiasp",
            MInst::Adrp { .. } => "adrp",
            MInst::Nop => "nop",
            MInst::Halt => "halt",
            MInst::Sys(s) => s.name(),
            MInst::SysPrekey { .. } => "sys_prekey",
        }
    }

    /// Registers read by the instruction.
    pub fn uses(&self) -> Vec<Reg> {
        let src = |s: &Src| match s {
            Src::Reg(r) => vec![*r],
            Src::Imm(_) => vec![],
        };
        match self {
            MInst::Ldr { rn, .. } | MInst::Ldrw { rn, .. } => vec![*rn],
            MInst::Str { rt, rn, .. } | MInst::Strw { rt, rn, .. } => vec![*rt, *rn],
            MInst::Ldp { rn, .. } => vec![*rn],
            MInst::Stp { rt1, rt2, rn, .. } => vec![*rt1, *rt2, *rn],
            MInst::Mov { rn, .. } => vec![*rn],
            MInst::Alu { rn, src: s, .. } => {
                let mut v = vec![*rn];
                v.extend(src(s));
                v
            }
            MInst::Cmp { rn, src: s } => {
                let mut v = vec![*rn];
                v.extend(src(s));
                v
            }
            MInst::Blr { rn } => vec![*rn],
            MInst::Blraa { rn, rc } => vec![*rn, *rc],
            MInst::Pacia { rd, rn } | MInst::Autia { rd, rn } => vec![*rd, *rn],
            MInst::SysPrekey { rn, rc } => vec![*rn, *rc],
            MInst::Ret | MInst::Retaa | MInst::Paciasp | MInst::Autiasp => vec![Reg::Lr],
            _ => vec![],
        }
    }

    /// Registers written by the instruction.
    pub fn defs(&self) -> Vec<Reg> {
        match self {
            MInst::Ldr { rt, .. } | MInst::Ldrw { rt, .. } => vec![*rt],
            MInst::Ldp { rt1, rt2, .. } => vec![*rt1, *rt2],
            MInst::Mov { rd, .. }
            | MInst::MovImm { rd, .. }
            | MInst::Alu { rd, .. }
            | MInst::Cset { rd, .. }
            | MInst::Pacia { rd, .. }
            | MInst::Autia { rd, .. }
            | MInst::Adrp { rd, .. } => vec![*rd],
            MInst::Paciasp | MInst::Autiasp => vec![Reg::Lr],
            MInst::Bl { .. } | MInst::Blr { .. } | MInst::Blraa { .. } => {
                let mut v: Vec<Reg> = (0..ARG_REGS).map(Reg::R).collect();
                v.push(SCRATCH);
                v.push(Reg::Lr);
                v
            }
            _ => vec![],
        }
    }

    pub fn map_regs(&mut self, mut f: impl FnMut(Reg) -> Reg) {
        let src = |s: &mut Src, f: &mut dyn FnMut(Reg) -> Reg| {
            if let Src::Reg(r) = s {
                *r = f(*r);
            }
        };
        match self {
            MInst::Ldr { rt, rn, .. }
            | MInst::Str { rt, rn, .. }
            | MInst::Ldrw { rt, rn, .. }
            | MInst::Strw { rt, rn, .. } => {
                *rt = f(*rt);
                *rn = f(*rn);
            }
            MInst::Ldp { rt1, rt2, rn, .. } | MInst::Stp { rt1, rt2, rn, .. } => {
                *rt1 = f(*rt1);
                *rt2 = f(*rt2);
                *rn = f(*rn);
            }
            MInst::Mov { rd, rn } | MInst::Pacia { rd, rn } | MInst::Autia { rd, rn } => {
                *rd = f(*rd);
                *rn = f(*rn);
            }
            MInst::MovImm { rd, .. } | MInst::Cset { rd, .. } | MInst::Adrp { rd, .. } => *rd = f(*rd),
            MInst::Alu { rd, rn, src: s, .. } => {
                *rd = f(*rd);
                *rn = f(*rn);
                src(s, &mut f);
            }
            MInst::Cmp { rn, src: s } => {
                *rn = f(*rn);
                src(s, &mut f);
            }
            MInst::Blr { rn } => *rn = f(*rn),
            MInst::Blraa { rn, rc } | MInst::SysPrekey { rn, rc } => {
                *rn = f(*rn);
                *rc = f(*rc);
            }
            _ => {}
        }
    }

    /// Label this instruction may transfer control to, besides falling through.
    pub fn branch_target(&self) -> Option<&str> {
        match self {
            MInst::B { target } | MInst::BCond { target, .. } => Some(target),
            _ => None,
        }
    }

    /// True when control never falls through to the next instruction.
    pub fn ends_flow(&self) -> bool {
        matches!(self, MInst::B { .. } | MInst::Ret | MInst::Retaa | MInst::Halt)
    }
}

fn mem(f: &mut fmt::Formatter<'_>, rn: &Reg, off: i64) -> fmt::Result {
    if off == 0 {
        write!(f, "[{rn}]")
    } else {
        write!(f, "[{rn}, #{off}]")
    }
}

impl fmt::Display for MInst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match self {
            MInst::Ldr { rt, rn, off }
            | MInst::Str { rt, rn, off }
            | MInst::Ldrw { rt, rn, off }
            | MInst::Strw { rt, rn, off } => {
                write!(f, "{m} {rt}, ")?;
                mem(f, rn, *off)
            }
            MInst::Ldp { rt1, rt2, rn, off } | MInst::Stp { rt1, rt2, rn, off } => {
                write!(f, "{m} {rt1}, {rt2}, ")?;
                mem(f, rn, *off)
            }
            MInst::Mov { rd, rn } | MInst::Pacia { rd, rn } | MInst::Autia { rd, rn } => write!(f, "{m} {rd}, {rn}"),
            MInst::MovImm { rd, imm } => write!(f, "{m} {rd}, #{imm:#x}"),
            MInst::Alu { rd, rn, src, .. } => write!(f, "{m} {rd}, {rn}, {src}"),
            MInst::Cmp { rn, src } => write!(f, "{m} {rn}, {src}"),
            MInst::Cset { rd, cond } => write!(f, "{m} {rd}, {}", cond.name()),
            MInst::B { target } | MInst::Bl { target } => write!(f, "{m} {target}"),
            MInst::BCond { cond, target } => write!(f, "b.{} {target}", cond.name()),
            MInst::Blr { rn } => write!(f, "{m} {rn}"),
            MInst::Blraa { rn, rc } | MInst::SysPrekey { rn, rc } => write!(f, "{m} {rn}, {rc}"),
            MInst::Adrp { rd, sym } => write!(f, "{m} {rd}, {sym}"),
            _ => f.write_str(m),
        }
    }
}

fn parse_imm(s: &str) -> Result<i64, String> {
    let t = s.strip_prefix('#').ok_or_else(|| format!("expected immediate, found `{s}`"))?;
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let v = match t.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).map(|v| v as i64),
        None => t.parse::<i64>(),
    }
    .map_err(|_| format!("bad immediate `{s}`"))?;
    Ok(if neg { v.wrapping_neg() } else { v })
}

fn parse_src(s: &str) -> Result<Src, String> {
    if s.starts_with('#') {
        parse_imm(s).map(Src::Imm)
    } else {
        s.parse().map(Src::Reg)
    }
}

impl FromStr for MInst {
    type Err = String;

    fn from_str(line: &str) -> Result<MInst, String> {
        let line = line.trim();
        let (m, rest) = line.split_once(' ').unwrap_or((line, ""));
        // Memory operands carry their own comma; split them off first.
        let (regs_part, mem_part) = match rest.find('[') {
            Some(i) => (&rest[..i], Some(rest[i..].trim())),
            None => (rest, None),
        };
        let ops: Vec<&str> = regs_part.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let reg = |i: usize| -> Result<Reg, String> {
            ops.get(i).ok_or_else(|| format!("missing operand in `{line}`"))?.parse()
        };
        let addr = || -> Result<(Reg, i64), String> {
            let inner = mem_part
                .and_then(|m| m.strip_prefix('['))
                .and_then(|m| m.strip_suffix(']'))
                .ok_or_else(|| format!("missing memory operand in `{line}`"))?;
            let mut parts = inner.split(',').map(str::trim);
            let rn: Reg = parts.next().unwrap_or("").parse()?;
            let off = match parts.next() {
                Some(o) => parse_imm(o)?,
                None => 0,
            };
            Ok((rn, off))
        };
        let target = || ops.first().map(|s| s.to_string()).ok_or_else(|| format!("missing target in `{line}`"));
        let inst = match m {
            "ldr" | "str" | "ldrw" | "strw" => {
                let rt = reg(0)?;
                let (rn, off) = addr()?;
                match m {
                    "ldr" => MInst::Ldr { rt, rn, off },
                    "str" => MInst::Str { rt, rn, off },
                    "ldrw" => MInst::Ldrw { rt, rn, off },
                    _ => MInst::Strw { rt, rn, off },
                }
            }
            "ldp" | "stp" => {
                let (rt1, rt2) = (reg(0)?, reg(1)?);
                let (rn, off) = addr()?;
                if m == "ldp" {
                    MInst::Ldp { rt1, rt2, rn, off }
                } else {
                    MInst::Stp { rt1, rt2, rn, off }
                }
            }
            "mov" => MInst::Mov { rd: reg(0)?, rn: reg(1)? },
            "pacia" => MInst::Pacia { rd: reg(0)?, rn: reg(1)? },
            "autia" => MInst::Autia { rd: reg(0)?, rn: reg(1)? },
            "movimm" => MInst::MovImm { rd: reg(0)?, imm: parse_imm(ops.get(1).copied().unwrap_or(""))? as u64 },
            "add" | "sub" | "and" | "orr" | "lsl" | "lsr" => {
                let op = match m {
                    "add" => AluOp::Add,
                    "sub" => AluOp::Sub,
                    "and" => AluOp::And,
                    "orr" => AluOp::Orr,
                    "lsl" => AluOp::Lsl,
                    _ => AluOp::Lsr,
                };
                MInst::Alu { op, rd: reg(0)?, rn: reg(1)?, src: parse_src(ops.get(2).copied().unwrap_or(""))? }
            }
            "cmp" => MInst::Cmp { rn: reg(0)?, src: parse_src(ops.get(1).copied().unwrap_or(""))? },
            "cset" => MInst::Cset {
                rd: reg(0)?,
                cond: Cond::from_name(ops.get(1).copied().unwrap_or(""))
                    .ok_or_else(|| format!("bad condition in `{line}`"))?,
            },
            "b" => MInst::B { target: target()? },
            "bl" => MInst::Bl { target: target()? },
            "blr" => MInst::Blr { rn: reg(0)? },
            "blraa" => MInst::Blraa { rn: reg(0)?, rc: reg(1)? },
            "sys_prekey" => MInst::SysPrekey { rn: reg(0)?, rc: reg(1)? },
            "ret" => MInst::Ret,
            "retaa" => MInst::Retaa,
            "paciasp" => MInst::Paciasp,
            "autiasp" => MInst::Autiasp,
            "adrp" => MInst::Adrp {
                rd: reg(0)?,
                sym: ops.get(1).ok_or_else(|| format!("missing symbol in `{line}`"))?.to_string(),
            },
            "nop" => MInst::Nop,
            "halt" => MInst::Halt,
            _ => {
                if let Some(c) = m.strip_prefix("b.") {
                    let cond = Cond::from_name(c).ok_or_else(|| format!("bad condition in `{line}`"))?;
                    MInst::BCond { cond, target: target()? }
                } else if let Some(s) = Sys::from_name(m) {
                    MInst::Sys(s)
                } else {
                    return Err(format!("unknown instruction `{line}`"));
                }
            }
        };
        Ok(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let samples = [
            "ldr r4, [r5, #8]",
            "str r4, [sp]",
            "stp lr, r4, [sp, #16]",
            "movimm r28, #0xffffe00000100000",
            "add sp, sp, #-32",
            "orr v3, v3, r28",
            "cmp r4, #0x0",
            "cset r5, lo",
            "b.ne main.loop",
            "bl @helper",
            "blraa r6, r7",
            "adrp r4, @ops",
            "sys_prekey r4, r5",
            "sys_memcpy",
            "retaa",
        ];
        for s in samples {
            let inst: MInst = s.parse().unwrap();
            let again: MInst = inst.to_string().parse().unwrap();
            assert_eq!(inst, again, "{s}");
        }
    }
}
