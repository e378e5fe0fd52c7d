//! Miniature typed IR standing in for kernel LLVM IR.
//!
//! Values are SSA-like locals (`%x`), symbols (`@g`, `@f`) and integer
//! literals. Memory is only reached through globals, `gep`, `load` and
//! `store`; there is no `alloca`.

mod layout;
mod parse;
mod print;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use layout::{GepInfo, Layout, ValueTypes};
pub use parse::parse_module;
pub use validate::{validate_module, Diagnostic};

/// Instrumentation stubs the IR may call without defining.
pub const INTRINSICS: &[&str] =
    &["pac_store", "pac_load", "pac_call", "pac_const", "pb_restore", "pac_memcpy", "pac_memmove"];

pub fn is_intrinsic(name: &str) -> bool {
    INTRINSICS.contains(&name)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Type {
    I32,
    I64,
    VoidPtr,
    Ptr(Box<Type>),
    /// Function pointer; the payload is the canonical signature text.
    FnPtr(String),
    /// Reference to a named struct or union.
    Named(String),
    Array(Box<Type>, u64),
}

impl Type {
    pub fn ptr(inner: Type) -> Type {
        Type::Ptr(Box::new(inner))
    }

    pub fn pointee(&self) -> Option<&Type> {
        match self {
            Type::Ptr(t) => Some(t),
            _ => None,
        }
    }

    /// Indirection depth to a function pointer, if the type denotes one.
    pub fn fp_level(&self) -> Option<u8> {
        match self {
            Type::FnPtr(_) => Some(0),
            Type::Ptr(t) => t.fp_level().map(|l| l + 1),
            Type::Array(t, _) => t.fp_level(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregateKind {
    Struct,
    Union,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub ty: Type,
    pub align: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDef {
    pub name: String,
    pub kind: AggregateKind,
    pub fields: Vec<Field>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Annotation {
    /// Boot-trusted computed pointer, re-signed under the constant context.
    ConstantCtx,
    /// Physical-address pointer, re-encoded right before its call site.
    Phys,
}

impl Annotation {
    pub fn keyword(self) -> &'static str {
        match self {
            Annotation::ConstantCtx => "@constant_ctx",
            Annotation::Phys => "@phys",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Init {
    Int(i64),
    Null,
    Zero,
    /// Function or global symbol; its address is the stored value.
    Symbol(String),
    Aggregate(Vec<Init>),
    /// Union initializer naming the active member.
    Member(String, Box<Init>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalVar {
    pub name: String,
    pub ty: Type,
    pub init: Init,
    pub annotation: Option<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Local(String),
    Symbol(String),
    Int(i64),
    Null,
}

impl Operand {
    pub fn local(&self) -> Option<&str> {
        match self {
            Operand::Local(n) => Some(n),
            _ => None,
        }
    }

    pub fn symbol(&self) -> Option<&str> {
        match self {
            Operand::Symbol(n) => Some(n),
            _ => None,
        }
    }

    pub fn int(&self) -> Option<i64> {
        match self {
            Operand::Int(v) => Some(*v),
            Operand::Null => Some(0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Bitcast,
    Icmp,
    Phi,
    Store,
    Load,
    Gep,
    Call,
    CallPtr,
    Add,
    Sub,
    Mov,
    Ret,
    Br,
    Memcpy,
    Memmove,
    Nop,
}

impl Opcode {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Bitcast => "bitcast",
            Opcode::Icmp => "icmp",
            Opcode::Phi => "phi",
            Opcode::Store => "store",
            Opcode::Load => "load",
            Opcode::Gep => "gep",
            Opcode::Call => "call",
            Opcode::CallPtr => "callptr",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mov => "mov",
            Opcode::Ret => "ret",
            Opcode::Br => "br",
            Opcode::Memcpy => "memcpy",
            Opcode::Memmove => "memmove",
            Opcode::Nop => "nop",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Some(match s {
            "bitcast" => Opcode::Bitcast,
            "icmp" => Opcode::Icmp,
            "phi" => Opcode::Phi,
            "store" => Opcode::Store,
            "load" => Opcode::Load,
            "gep" => Opcode::Gep,
            "call" => Opcode::Call,
            "callptr" => Opcode::CallPtr,
            "add" => Opcode::Add,
            "sub" => Opcode::Sub,
            "mov" => Opcode::Mov,
            "ret" => Opcode::Ret,
            "br" => Opcode::Br,
            "memcpy" => Opcode::Memcpy,
            "memmove" => Opcode::Memmove,
            "nop" => Opcode::Nop,
            _ => return None,
        })
    }

    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::Ret | Opcode::Br)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pred {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
    Ult,
    Ugt,
}

impl Pred {
    pub fn keyword(self) -> &'static str {
        match self {
            Pred::Eq => "eq",
            Pred::Ne => "ne",
            Pred::Slt => "slt",
            Pred::Sle => "sle",
            Pred::Sgt => "sgt",
            Pred::Sge => "sge",
            Pred::Ult => "ult",
            Pred::Ugt => "ugt",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Pred> {
        Some(match s {
            "eq" => Pred::Eq,
            "ne" => Pred::Ne,
            "slt" => Pred::Slt,
            "sle" => Pred::Sle,
            "sgt" => Pred::Sgt,
            "sge" => Pred::Sge,
            "ult" => Pred::Ult,
            "ugt" => Pred::Ugt,
            _ => return None,
        })
    }

    pub fn eval(self, a: u64, b: u64) -> bool {
        let (sa, sb) = (a as i64, b as i64);
        match self {
            Pred::Eq => a == b,
            Pred::Ne => a != b,
            Pred::Slt => sa < sb,
            Pred::Sle => sa <= sb,
            Pred::Sgt => sa > sb,
            Pred::Sge => sa >= sb,
            Pred::Ult => a < b,
            Pred::Ugt => a > b,
        }
    }
}

/// One IR instruction. Operand meaning depends on the opcode:
///
/// | opcode   | operands                    | other fields                |
/// |----------|-----------------------------|-----------------------------|
/// | load     | `[addr]`                    | `ty` = loaded type          |
/// | store    | `[value, addr]`             |                             |
/// | gep      | `[base, i0, i1, ...]`       |                             |
/// | bitcast  | `[value]`                   | `ty` = target type          |
/// | icmp     | `[lhs, rhs]`                | `pred`                      |
/// | phi      | `[v1, v2, ...]`             | `targets` = incoming blocks |
/// | call     | `[args...]`                 | `callee`, optional `ty`     |
/// | callptr  | `[fp, args...]`             |                             |
/// | br       | `[]` or `[cond]`            | `targets`                   |
/// | memcpy   | `[dst, src, len]`           |                             |
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inst {
    pub result: Option<String>,
    pub opcode: Opcode,
    pub operands: Vec<Operand>,
    pub ty: Option<Type>,
    pub pred: Option<Pred>,
    pub callee: Option<String>,
    pub targets: Vec<String>,
    pub annotation: Option<Annotation>,
}

impl Inst {
    pub fn new(opcode: Opcode, operands: Vec<Operand>) -> Inst {
        Inst {
            result: None,
            opcode,
            operands,
            ty: None,
            pred: None,
            callee: None,
            targets: Vec::new(),
            annotation: None,
        }
    }

    pub fn with_result(mut self, name: impl Into<String>) -> Inst {
        self.result = Some(name.into());
        self
    }

    pub fn call(callee: impl Into<String>, args: Vec<Operand>) -> Inst {
        let mut i = Inst::new(Opcode::Call, args);
        i.callee = Some(callee.into());
        i
    }

    /// Callee name when this is a call to one of the instrumentation stubs.
    pub fn stub(&self) -> Option<&str> {
        match (&self.opcode, &self.callee) {
            (Opcode::Call, Some(c)) if is_intrinsic(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_stub(&self, name: &str) -> bool {
        self.stub() == Some(name)
    }

    pub fn expected_arity(&self) -> Option<std::ops::RangeInclusive<usize>> {
        Some(match self.opcode {
            Opcode::Bitcast | Opcode::Load | Opcode::Mov => 1..=1,
            Opcode::Icmp | Opcode::Store | Opcode::Add | Opcode::Sub => 2..=2,
            Opcode::Memcpy | Opcode::Memmove => 3..=3,
            Opcode::Gep | Opcode::CallPtr => 1..=usize::MAX,
            Opcode::Phi => 1..=usize::MAX,
            Opcode::Ret => 0..=1,
            Opcode::Br => 0..=1,
            Opcode::Nop => 0..=0,
            Opcode::Call => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Inst>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<(String, Type)>,
    pub ret: Option<Type>,
    pub init_text: bool,
    pub blocks: Vec<Block>,
}

impl Function {
    pub fn signature(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(_, t)| t.to_string()).collect();
        signature_text(&params, self.ret.as_ref())
    }

    pub fn insts(&self) -> impl Iterator<Item = &Inst> + '_ {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }

    pub fn inst_count(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len()).sum()
    }
}

pub(crate) fn signature_text(params: &[String], ret: Option<&Type>) -> String {
    match ret {
        Some(r) => format!("fn({})->{}", params.join(","), r),
        None => format!("fn({})", params.join(",")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Module {
    pub types: Vec<TypeDef>,
    pub globals: Vec<GlobalVar>,
    pub functions: Vec<Function>,
    /// Function symbols used as values (non-callee operands or initializer
    /// leaves).
    pub address_taken: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("line {line}: syntax error: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("unresolved symbol `{0}`")]
    UnresolvedSymbol(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

impl Module {
    pub fn typedef(&self, name: &str) -> Option<&TypeDef> {
        self.types.iter().find(|t| t.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalVar> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn type_map(&self) -> BTreeMap<&str, &TypeDef> {
        self.types.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    /// Recomputes `address_taken` by scanning initializers and operands.
    pub fn recompute_address_taken(&mut self) {
        let mut taken = BTreeSet::new();
        fn walk(init: &Init, m: &Module, out: &mut BTreeSet<String>) {
            match init {
                Init::Symbol(s) if m.function(s).is_some() => {
                    out.insert(s.clone());
                }
                Init::Aggregate(items) => items.iter().for_each(|i| walk(i, m, out)),
                Init::Member(_, i) => walk(i, m, out),
                _ => {}
            }
        }
        for g in &self.globals {
            walk(&g.init, self, &mut taken);
        }
        for f in &self.functions {
            for inst in f.insts() {
                for op in &inst.operands {
                    if let Operand::Symbol(s) = op {
                        if self.function(s).is_some() {
                            taken.insert(s.clone());
                        }
                    }
                }
            }
        }
        self.address_taken = taken;
    }
}
