use std::fmt::{self, Display, Formatter};

use super::{AggregateKind, Function, GlobalVar, Init, Inst, Module, Opcode, Operand, Type, TypeDef};

impl Display for Type {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Type::I32 => f.write_str("i32"),
            Type::I64 => f.write_str("i64"),
            Type::VoidPtr => f.write_str("void*"),
            Type::Ptr(t) => write!(f, "{t}*"),
            Type::FnPtr(sig) => f.write_str(sig),
            Type::Named(n) => write!(f, "%{n}"),
            Type::Array(t, n) => write!(f, "[{n} x {t}]"),
        }
    }
}

impl Display for Operand {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Local(n) => write!(f, "%{n}"),
            Operand::Symbol(n) => write!(f, "@{n}"),
            Operand::Int(v) => write!(f, "{v}"),
            Operand::Null => f.write_str("null"),
        }
    }
}

impl Display for Init {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Init::Int(v) => write!(f, "{v}"),
            Init::Null => f.write_str("null"),
            Init::Zero => f.write_str("zeroinit"),
            Init::Symbol(s) => write!(f, "@{s}"),
            Init::Aggregate(items) => {
                f.write_str("{ ")?;
                write_list(f, items)?;
                f.write_str(" }")
            }
            Init::Member(name, init) => write!(f, "{{ {name} = {init} }}"),
        }
    }
}

fn write_list<T: Display>(f: &mut Formatter<'_>, items: &[T]) -> fmt::Result {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{item}")?;
    }
    Ok(())
}

impl Display for TypeDef {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            AggregateKind::Struct => "struct",
            AggregateKind::Union => "union",
        };
        write!(f, "type %{} = {kind} {{ ", self.name)?;
        for (i, field) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}: {} @{}", field.name, field.ty, field.align)?;
        }
        f.write_str(" }")
    }
}

impl Display for GlobalVar {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write!(f, "global @{} : {} = {}", self.name, self.ty, self.init)?;
        if let Some(a) = self.annotation {
            write!(f, " {}", a.keyword())?;
        }
        Ok(())
    }
}

impl Display for Inst {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.result {
            write!(f, "%{r} = ")?;
        }
        let ops = &self.operands;
        match self.opcode {
            Opcode::Load => {
                write!(f, "load ")?;
                if let Some(t) = &self.ty {
                    write!(f, "{t}, ")?;
                }
                write_list(f, ops)?;
            }
            Opcode::Bitcast => {
                f.write_str("bitcast ")?;
                write_list(f, ops)?;
                if let Some(t) = &self.ty {
                    write!(f, " to {t}")?;
                }
            }
            Opcode::Icmp => {
                write!(f, "icmp {} ", self.pred.map_or("eq", |p| p.keyword()))?;
                write_list(f, ops)?;
            }
            Opcode::Phi => {
                f.write_str("phi ")?;
                for (i, (v, b)) in ops.iter().zip(&self.targets).enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "[{v}, {b}]")?;
                }
            }
            Opcode::Call => {
                f.write_str("call ")?;
                if let Some(t) = &self.ty {
                    write!(f, "{t} ")?;
                }
                write!(f, "@{}(", self.callee.as_deref().unwrap_or("?"))?;
                write_list(f, ops)?;
                f.write_str(")")?;
            }
            Opcode::CallPtr => {
                f.write_str("callptr ")?;
                if let Some((callee, args)) = ops.split_first() {
                    write!(f, "{callee}(")?;
                    write_list(f, args)?;
                    f.write_str(")")?;
                }
                if let Some(t) = &self.ty {
                    write!(f, " : {t}")?;
                }
            }
            Opcode::Br => {
                f.write_str("br ")?;
                let mut parts: Vec<String> = ops.iter().map(|o| o.to_string()).collect();
                parts.extend(self.targets.iter().cloned());
                f.write_str(&parts.join(", "))?;
            }
            Opcode::Ret | Opcode::Nop if ops.is_empty() => f.write_str(self.opcode.mnemonic())?,
            op => {
                write!(f, "{} ", op.mnemonic())?;
                write_list(f, ops)?;
            }
        }
        if let Some(a) = self.annotation {
            write!(f, " {}", a.keyword())?;
        }
        Ok(())
    }
}

impl Display for Function {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write!(f, "func @{}(", self.name)?;
        for (i, (n, t)) in self.params.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "%{n}: {t}")?;
        }
        f.write_str(")")?;
        if let Some(r) = &self.ret {
            write!(f, " -> {r}")?;
        }
        if self.init_text {
            f.write_str(" init_text")?;
        }
        f.write_str(" {\n")?;
        for b in &self.blocks {
            writeln!(f, "{}:", b.label)?;
            for i in &b.insts {
                writeln!(f, "  {i}")?;
            }
        }
        f.write_str("}\n")
    }
}

impl Display for Module {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        for t in &self.types {
            writeln!(f, "{t}")?;
        }
        for g in &self.globals {
            writeln!(f, "{g}")?;
        }
        for func in &self.functions {
            writeln!(f)?;
            write!(f, "{func}")?;
        }
        Ok(())
    }
}
