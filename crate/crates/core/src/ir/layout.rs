use std::collections::HashMap;

use super::{AggregateKind, Function, IrError, Module, Opcode, Operand, Type};

/// Byte layout of module types. By-value cycles get size zero; they are
/// reported by the struct analysis, not here.
#[derive(Debug, Clone)]
pub struct Layout<'m> {
    module: &'m Module,
    sizes: HashMap<&'m str, (u64, u64)>,
}

/// Result of resolving a `gep` against its base pointer type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GepInfo {
    pub offset: i64,
    /// Pointer to the addressed element.
    pub result: Type,
    /// Each aggregate step taken after the leading index: (container, index).
    pub steps: Vec<(Type, u64)>,
}

impl<'m> Layout<'m> {
    pub fn new(module: &'m Module) -> Self {
        let mut layout = Layout { module, sizes: HashMap::new() };
        for def in &module.types {
            let mut visiting = Vec::new();
            layout.named(&def.name, &mut visiting);
        }
        layout
    }

    fn named(&mut self, name: &'m str, visiting: &mut Vec<&'m str>) -> (u64, u64) {
        if let Some(&sz) = self.sizes.get(name) {
            return sz;
        }
        if visiting.contains(&name) {
            return (0, 1);
        }
        let Some(def) = self.module.typedef(name) else {
            return (0, 1);
        };
        visiting.push(name);
        let mut offset = 0u64;
        let mut size = 0u64;
        let mut align = 1u64;
        for field in &def.fields {
            let (fsize, _) = self.compute(&field.ty, visiting);
            let falign = field.align.max(1);
            align = align.max(falign);
            match def.kind {
                AggregateKind::Struct => {
                    offset = offset.next_multiple_of(falign);
                    offset += fsize;
                    size = offset;
                }
                AggregateKind::Union => size = size.max(fsize),
            }
        }
        visiting.pop();
        let result = (size.next_multiple_of(align), align);
        self.sizes.insert(name, result);
        result
    }

    fn compute(&mut self, ty: &'m Type, visiting: &mut Vec<&'m str>) -> (u64, u64) {
        match ty {
            Type::I32 => (4, 4),
            Type::I64 | Type::VoidPtr | Type::Ptr(_) | Type::FnPtr(_) => (8, 8),
            Type::Array(t, n) => {
                let (s, a) = self.compute(t, visiting);
                (s * n, a)
            }
            Type::Named(n) => self.named(n, visiting),
        }
    }

    pub fn size_of(&self, ty: &Type) -> u64 {
        self.size_align(ty).0
    }

    pub fn align_of(&self, ty: &Type) -> u64 {
        self.size_align(ty).1
    }

    fn size_align(&self, ty: &Type) -> (u64, u64) {
        match ty {
            Type::I32 => (4, 4),
            Type::I64 | Type::VoidPtr | Type::Ptr(_) | Type::FnPtr(_) => (8, 8),
            Type::Array(t, n) => {
                let (s, a) = self.size_align(t);
                (s * n, a)
            }
            Type::Named(n) => self.sizes.get(n.as_str()).copied().unwrap_or((0, 1)),
        }
    }

    /// Byte offsets of the fields of a named aggregate.
    pub fn field_offsets(&self, name: &str) -> Vec<u64> {
        let Some(def) = self.module.typedef(name) else {
            return Vec::new();
        };
        let mut offset = 0u64;
        def.fields
            .iter()
            .map(|f| match def.kind {
                AggregateKind::Union => 0,
                AggregateKind::Struct => {
                    offset = offset.next_multiple_of(f.align.max(1));
                    let here = offset;
                    offset += self.size_of(&f.ty);
                    here
                }
            })
            .collect()
    }

    pub fn gep(&self, base: &Type, indices: &[i64]) -> Result<GepInfo, IrError> {
        let pointee = base
            .pointee()
            .ok_or_else(|| IrError::TypeMismatch(format!("gep base of type {base} is not a typed pointer")))?;
        let (first, rest) =
            indices.split_first().ok_or_else(|| IrError::TypeMismatch("gep needs at least one index".into()))?;
        let mut offset = first * self.size_of(pointee) as i64;
        let mut cur = pointee.clone();
        let mut steps = Vec::new();
        for &idx in rest {
            let next = match &cur {
                Type::Named(n) => {
                    let def = self.module.typedef(n).ok_or_else(|| IrError::UnresolvedSymbol(format!("%{n}")))?;
                    let field = usize::try_from(idx)
                        .ok()
                        .and_then(|i| def.fields.get(i))
                        .ok_or_else(|| IrError::TypeMismatch(format!("field index {idx} out of range for %{n}")))?;
                    offset += self.field_offsets(n)[idx as usize] as i64;
                    field.ty.clone()
                }
                Type::Array(t, count) => {
                    if idx < 0 || idx as u64 >= *count {
                        return Err(IrError::TypeMismatch(format!("array index {idx} out of range")));
                    }
                    offset += idx * self.size_of(t) as i64;
                    (**t).clone()
                }
                other => return Err(IrError::TypeMismatch(format!("cannot index into {other}"))),
            };
            steps.push((cur, idx as u64));
            cur = next;
        }
        Ok(GepInfo { offset, result: Type::ptr(cur), steps })
    }
}

/// Static types of every local in one function.
#[derive(Debug, Clone, Default)]
pub struct ValueTypes {
    types: HashMap<String, Type>,
}

impl ValueTypes {
    pub fn compute(module: &Module, layout: &Layout<'_>, func: &Function) -> Result<ValueTypes, IrError> {
        let mut vt = ValueTypes::default();
        for (name, ty) in &func.params {
            vt.types.insert(name.clone(), ty.clone());
        }
        // Phis may name values defined later in the block order.
        for pass in 0..2 {
            for inst in func.insts() {
                let Some(result) = &inst.result else { continue };
                if pass == 1 && vt.types.contains_key(result) && inst.opcode != Opcode::Phi {
                    continue;
                }
                let ty = match inst.opcode {
                    Opcode::Load | Opcode::Bitcast => inst.ty.clone().unwrap_or(Type::I64),
                    Opcode::Icmp => Type::I32,
                    Opcode::Gep => {
                        let Some(base) = inst.operands.first() else { continue };
                        let Some(base_ty) = vt.operand(module, base) else {
                            if pass == 0 {
                                continue;
                            }
                            return Err(IrError::UnresolvedSymbol(base.to_string()));
                        };
                        let idx: Vec<i64> = inst.operands[1..].iter().filter_map(Operand::int).collect();
                        if idx.len() + 1 != inst.operands.len() {
                            return Err(IrError::TypeMismatch("gep indices must be integer constants".into()));
                        }
                        layout.gep(&base_ty, &idx)?.result
                    }
                    Opcode::Phi | Opcode::Add | Opcode::Sub | Opcode::Mov => {
                        match inst.operands.iter().find_map(|o| vt.operand(module, o)) {
                            Some(t) => t,
                            None if pass == 0 => continue,
                            None => Type::I64,
                        }
                    }
                    Opcode::Call => match (inst.ty.clone(), inst.callee.as_deref()) {
                        (Some(t), _) => t,
                        (None, Some("pb_restore")) => Type::I64,
                        (None, Some(c)) if super::is_intrinsic(c) => {
                            inst.operands.first().and_then(|o| vt.operand(module, o)).unwrap_or(Type::I64)
                        }
                        (None, Some(c)) => module.function(c).and_then(|f| f.ret.clone()).unwrap_or(Type::I64),
                        (None, None) => Type::I64,
                    },
                    Opcode::CallPtr => inst.ty.clone().unwrap_or(Type::I64),
                    _ => continue,
                };
                vt.types.insert(result.clone(), ty);
            }
        }
        Ok(vt)
    }

    pub fn local(&self, name: &str) -> Option<&Type> {
        self.types.get(name)
    }

    pub fn operand(&self, module: &Module, op: &Operand) -> Option<Type> {
        match op {
            Operand::Local(n) => self.types.get(n).cloned(),
            Operand::Symbol(s) => {
                if let Some(g) = module.global(s) {
                    Some(Type::ptr(g.ty.clone()))
                } else {
                    module.function(s).map(|f| Type::FnPtr(f.signature()))
                }
            }
            Operand::Int(_) => Some(Type::I64),
            Operand::Null => Some(Type::VoidPtr),
        }
    }
}
