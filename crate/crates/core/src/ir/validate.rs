use std::fmt;

use super::{Inst, Module, Opcode, Type};
use crate::codec::MAX_FN_INDEX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Function the problem was found in, if any.
    pub function: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.function {
            Some(func) => write!(f, "@{func}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn stub_arity(name: &str) -> usize {
    match name {
        "pac_store" => 2,
        "pac_memcpy" | "pac_memmove" => 3,
        _ => 1,
    }
}

fn check_inst(m: &Module, inst: &Inst, out: &mut Vec<String>) {
    let n = inst.operands.len();
    let op = inst.opcode.mnemonic();
    match inst.opcode {
        Opcode::Call => {
            let callee = inst.callee.as_deref().unwrap_or("");
            let want = match m.function(callee) {
                Some(f) => Some(f.params.len()),
                None if super::is_intrinsic(callee) => Some(stub_arity(callee)),
                None => None,
            };
            if let Some(want) = want {
                if want != n {
                    out.push(format!("call @{callee} has {n} arguments, expected {want}"));
                }
            }
        }
        _ => {
            if let Some(range) = inst.expected_arity() {
                if !range.contains(&n) {
                    out.push(format!("{op} has {n} operands"));
                }
            }
        }
    }
    match inst.opcode {
        Opcode::Phi if inst.targets.len() != n => out.push("phi incoming blocks do not match values".into()),
        Opcode::Br if inst.targets.len() != n + 1 => {
            out.push(format!("br with {n} conditions needs {} targets", n + 1))
        }
        Opcode::Load | Opcode::Gep | Opcode::Bitcast | Opcode::Icmp | Opcode::Phi if inst.result.is_none() => {
            out.push(format!("{op} without a result"))
        }
        Opcode::Store | Opcode::Memcpy | Opcode::Memmove | Opcode::Br | Opcode::Nop if inst.result.is_some() => {
            out.push(format!("{op} cannot produce a result"))
        }
        _ => {}
    }
}

/// Checks structural invariants; an empty list means the module is well formed.
pub fn validate_module(m: &Module) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for t in &m.types {
        for field in &t.fields {
            if !matches!(field.align, 4 | 8) {
                diags.push(format!("field {}.{} has alignment {}", t.name, field.name, field.align));
            }
            if matches!(field.ty, Type::FnPtr(_)) && field.align != 8 {
                diags.push(format!("function pointer field {}.{} must be 8-aligned", t.name, field.name));
            }
        }
    }
    if m.address_taken.len() > MAX_FN_INDEX as usize {
        diags.push(format!("{} address-taken functions exceed the index space", m.address_taken.len()));
    }
    let mut out: Vec<Diagnostic> = diags.into_iter().map(|message| Diagnostic { function: None, message }).collect();
    for f in &m.functions {
        let mut msgs = Vec::new();
        if f.blocks.is_empty() {
            msgs.push("function has no blocks".to_string());
        }
        for b in &f.blocks {
            match b.insts.last() {
                Some(last) if last.opcode.is_terminator() => {}
                _ => msgs.push(format!("block `{}` does not end with a terminator", b.label)),
            }
            if b.insts.iter().rev().skip(1).any(|i| i.opcode.is_terminator()) {
                msgs.push(format!("block `{}` has a terminator before its end", b.label));
            }
            for inst in &b.insts {
                check_inst(m, inst, &mut msgs);
            }
        }
        out.extend(msgs.into_iter().map(|message| Diagnostic { function: Some(f.name.clone()), message }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    #[test]
    fn store_arity_and_missing_terminator() {
        let m = parse_module("global @g : i64 = 0\nfunc @f() {\nentry:\n  store @g\n}\n").unwrap();
        let d = validate_module(&m);
        assert!(d.iter().any(|d| d.message.contains("store has 1 operands")));
        assert!(d.iter().any(|d| d.message.contains("terminator")));
    }

    #[test]
    fn well_formed_is_clean() {
        let m = parse_module("func @f() {\nentry:\n  ret\n}\n").unwrap();
        assert!(validate_module(&m).is_empty());
    }

    #[test]
    fn bad_alignment() {
        let m = parse_module("type %s = struct { f: fn() @4 }\n").unwrap();
        assert_eq!(validate_module(&m).len(), 1);
    }
}
