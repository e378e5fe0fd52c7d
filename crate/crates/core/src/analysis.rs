//! Function pointer identification: global seeding, the field DAG, per
//! instruction transfer functions and the module-level fixpoint.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::ir::{
    AggregateKind, Annotation, Function, GepInfo, Init, Inst, IrError, Layout, Module, Opcode, Operand, Type,
    ValueTypes,
};

/// Deepest indirection level tracked.
pub const MAX_LEVEL: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueId {
    Local { func: String, name: String },
    Global(String),
}

impl ValueId {
    pub fn local(func: &str, name: &str) -> ValueId {
        ValueId::Local { func: func.to_string(), name: name.to_string() }
    }
}

impl fmt::Display for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueId::Local { func, name } => write!(f, "@{func}:%{name}"),
            ValueId::Global(g) => write!(f, "@{g}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FpSet {
    entries: BTreeMap<ValueId, u8>,
}

impl FpSet {
    pub fn get(&self, v: &ValueId) -> Option<u8> {
        self.entries.get(v).copied()
    }

    pub fn contains(&self, v: &ValueId) -> bool {
        self.entries.contains_key(v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ValueId, u8)> + '_ {
        self.entries.iter().map(|(k, v)| (k, *v))
    }

    /// True when every entry of `other` is present here with the same level.
    pub fn is_superset_of(&self, other: &FpSet) -> bool {
        other.entries.iter().all(|(k, l)| self.entries.get(k) == Some(l))
    }

    fn insert(&mut self, v: ValueId, level: u8, diags: &mut BTreeSet<String>) -> bool {
        if level > MAX_LEVEL {
            diags.insert(format!("{v} would have level {level}, above the supported maximum {MAX_LEVEL}"));
            return false;
        }
        match self.entries.get(&v) {
            Some(&old) if old == level => false,
            Some(&old) => {
                let (lo, hi) = (old.min(level), old.max(level));
                diags.insert(format!("{v} is used at both level {lo} and level {hi}"));
                false
            }
            None => {
                self.entries.insert(v, level);
                true
            }
        }
    }
}

/// A function pointer field: the outermost named type and the index path to
/// the field, with array indices normalized to zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldPath {
    pub root: String,
    pub path: Vec<u64>,
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.path.iter().map(u64::to_string).collect();
        write!(f, "{} {}", self.root, idx.join("."))
    }
}

/// Record of struct fields known to hold function pointers, organized over
/// the by-value type nesting graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FieldDag {
    pub fp_paths: BTreeSet<FieldPath>,
    /// By-value nesting: (parent type, child type, field index).
    pub edges: BTreeSet<(String, String, u64)>,
    /// Innermost (container type, field index) of every fp path.
    leaves: BTreeSet<(String, u64)>,
}

impl FieldDag {
    pub fn is_leaf(&self, container: &str, field: u64) -> bool {
        self.leaves.contains(&(container.to_string(), field))
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&str, u64)> + '_ {
        self.leaves.iter().map(|(t, i)| (t.as_str(), *i))
    }

    fn add_path(&mut self, m: &Module, fp: FieldPath) -> bool {
        let leaf = innermost_of_path(m, &fp);
        let mut changed = false;
        if let Some(leaf) = leaf {
            changed |= self.leaves.insert(leaf);
        }
        changed | self.fp_paths.insert(fp)
    }
}

/// Walks a field path through the type table and returns its innermost
/// (container, field index).
fn innermost_of_path(m: &Module, fp: &FieldPath) -> Option<(String, u64)> {
    let mut cur = Type::Named(fp.root.clone());
    let mut last = None;
    for &idx in &fp.path {
        cur = match cur {
            Type::Named(n) => {
                let field = m.typedef(&n)?.fields.get(idx as usize)?;
                last = Some((n, idx));
                field.ty.clone()
            }
            Type::Array(t, _) => *t,
            _ => return None,
        };
    }
    last
}

/// Globals statically initialized with function symbols.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalInitSet {
    /// Each initialized function symbol leaf: (global, index path from the
    /// global's own type).
    pub leaves: BTreeSet<(String, Vec<u64>)>,
    /// Type-level field paths of those leaves.
    pub paths: BTreeSet<FieldPath>,
}

impl GlobalInitSet {
    pub fn globals(&self) -> BTreeSet<&str> {
        self.leaves.iter().map(|(g, _)| g.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("type %{0} contains itself by value")]
    CyclicTypeDefinition(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisOptions {
    /// Distinguish union members by alignment and access width. When off,
    /// every member of a union is treated as the same storage.
    pub union_heuristic: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { union_heuristic: true }
    }
}

/// Result of the whole-module analysis.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FpFacts {
    pub set: FpSet,
    pub dag: FieldDag,
    pub sgi: GlobalInitSet,
    pub diagnostics: Vec<String>,
    /// Whole-module passes run until the set stopped changing.
    pub iterations: usize,
}

impl FpFacts {
    pub fn local_level(&self, func: &str, name: &str) -> Option<u8> {
        self.set.get(&ValueId::local(func, name))
    }

    /// Level of an operand inside `func`; function symbols are implicitly 0.
    pub fn operand_level(&self, m: &Module, func: &str, op: &Operand) -> Option<u8> {
        match op {
            Operand::Local(n) => self.local_level(func, n),
            Operand::Symbol(s) if m.function(s).is_some() => Some(0),
            Operand::Symbol(s) => self.set.get(&ValueId::Global(s.clone())),
            _ => None,
        }
    }

    /// Deterministic text listing of the identified set and fp fields.
    pub fn dump(&self) -> String {
        let mut lines: Vec<String> = self.set.iter().map(|(v, l)| format!("fp {v} level={l}")).collect();
        lines.extend(self.dag.fp_paths.iter().map(|p| format!("fpfield {p}")));
        lines.sort();
        let mut out = lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

fn walk_init(m: &Module, ty: &Type, init: &Init, path: &mut Vec<u64>, out: &mut Vec<(Vec<u64>, String)>) {
    match init {
        Init::Symbol(s) if m.function(s).is_some() => out.push((path.clone(), s.clone())),
        Init::Aggregate(items) => {
            for (i, item) in items.iter().enumerate() {
                let child = match ty {
                    Type::Array(t, _) => (**t).clone(),
                    Type::Named(n) => match m.typedef(n).and_then(|d| d.fields.get(i)) {
                        Some(f) => f.ty.clone(),
                        None => continue,
                    },
                    _ => continue,
                };
                path.push(i as u64);
                walk_init(m, &child, item, path, out);
                path.pop();
            }
        }
        Init::Member(name, inner) => {
            let Type::Named(n) = ty else { return };
            let Some(def) = m.typedef(n) else { return };
            if let Some(i) = def.fields.iter().position(|f| &f.name == name) {
                path.push(i as u64);
                walk_init(m, &def.fields[i].ty, inner, path, out);
                path.pop();
            }
        }
        _ => {}
    }
}

/// Function symbol leaves of a global's initializer, with their index paths.
pub fn init_fn_leaves(m: &Module, ty: &Type, init: &Init) -> Vec<(Vec<u64>, String)> {
    let mut out = Vec::new();
    walk_init(m, ty, init, &mut Vec::new(), &mut out);
    out
}

/// Converts an index path rooted at `ty` to a type-level field path rooted at
/// the first named type along it.
fn type_path(m: &Module, ty: &Type, path: &[u64], collapse_unions: bool) -> Option<FieldPath> {
    let mut cur = ty.clone();
    let mut out: Option<FieldPath> = None;
    for &idx in path {
        cur = match cur {
            Type::Named(n) => {
                let def = m.typedef(&n)?;
                let field = def.fields.get(idx as usize)?;
                let idx = if collapse_unions && def.kind == AggregateKind::Union { 0 } else { idx };
                out.get_or_insert_with(|| FieldPath { root: n.clone(), path: Vec::new() }).path.push(idx);
                field.ty.clone()
            }
            Type::Array(t, _) => {
                if let Some(fp) = out.as_mut() {
                    fp.path.push(0);
                }
                *t
            }
            _ => return None,
        };
    }
    out
}

pub fn analyze_global_fp(m: &Module) -> (FpSet, GlobalInitSet) {
    let mut set = FpSet::default();
    let mut sgi = GlobalInitSet::default();
    let mut diags = BTreeSet::new();
    for g in &m.globals {
        if g.annotation == Some(Annotation::ConstantCtx) {
            continue;
        }
        let leaves = init_fn_leaves(m, &g.ty, &g.init);
        if leaves.is_empty() {
            continue;
        }
        set.insert(ValueId::Global(g.name.clone()), 1, &mut diags);
        for (path, _) in leaves {
            if let Some(fp) = type_path(m, &g.ty, &path, false) {
                sgi.paths.insert(fp);
            }
            sgi.leaves.insert((g.name.clone(), path));
        }
    }
    (set, sgi)
}

fn holds_fn_ptr(t: &Type) -> bool {
    match t {
        Type::FnPtr(_) => true,
        Type::Array(inner, _) => holds_fn_ptr(inner),
        _ => false,
    }
}

fn by_value_child(t: &Type) -> Option<&str> {
    match t {
        Type::Named(n) => Some(n),
        Type::Array(inner, _) => by_value_child(inner),
        _ => None,
    }
}

pub fn analyze_struct(m: &Module, sgi: &GlobalInitSet) -> Result<FieldDag, AnalysisError> {
    let mut dag = FieldDag::default();
    for def in &m.types {
        for (i, field) in def.fields.iter().enumerate() {
            if let Some(child) = by_value_child(&field.ty) {
                dag.edges.insert((def.name.clone(), child.to_string(), i as u64));
            }
        }
    }
    // Depth-first search for a by-value cycle.
    let mut state: HashMap<&str, u8> = HashMap::new();
    fn visit<'a>(n: &'a str, dag: &'a FieldDag, state: &mut HashMap<&'a str, u8>) -> Result<(), String> {
        match state.get(n) {
            Some(1) => return Err(n.to_string()),
            Some(_) => return Ok(()),
            None => {}
        }
        state.insert(n, 1);
        for (_, child, _) in dag.edges.iter().filter(|(p, _, _)| p == n) {
            visit(child, dag, state)?;
        }
        state.insert(n, 2);
        Ok(())
    }
    for def in &m.types {
        visit(&def.name, &dag, &mut state).map_err(AnalysisError::CyclicTypeDefinition)?;
    }
    for def in &m.types {
        for (i, field) in def.fields.iter().enumerate() {
            if holds_fn_ptr(&field.ty) {
                let mut path = vec![i as u64];
                let mut t = &field.ty;
                while let Type::Array(inner, _) = t {
                    path.push(0);
                    t = inner;
                }
                dag.add_path(m, FieldPath { root: def.name.clone(), path });
            }
        }
    }
    for fp in &sgi.paths {
        dag.add_path(m, fp.clone());
    }
    Ok(dag)
}

/// Per-function context shared by the transfer functions.
pub struct FunctionCtx<'m> {
    pub module: &'m Module,
    pub func: &'m Function,
    pub types: ValueTypes,
    geps: HashMap<String, GepInfo>,
    /// Results of `pb_restore`, which hold raw addresses.
    restored: HashSet<String>,
    opts: AnalysisOptions,
    layout: &'m Layout<'m>,
}

impl<'m> FunctionCtx<'m> {
    pub fn new(
        module: &'m Module,
        layout: &'m Layout<'m>,
        func: &'m Function,
        opts: AnalysisOptions,
    ) -> Result<Self, IrError> {
        let types = ValueTypes::compute(module, layout, func)?;
        let mut geps = HashMap::new();
        let mut restored = HashSet::new();
        for inst in func.insts() {
            if let (true, Some(r)) = (inst.is_stub("pb_restore"), &inst.result) {
                restored.insert(r.clone());
            }
            if let (Opcode::Gep, Some(r)) = (inst.opcode, &inst.result) {
                let base = types
                    .operand(module, &inst.operands[0])
                    .ok_or_else(|| IrError::UnresolvedSymbol(inst.operands[0].to_string()))?;
                let idx: Vec<i64> = inst.operands[1..].iter().filter_map(Operand::int).collect();
                geps.insert(r.clone(), layout.gep(&base, &idx)?);
            }
        }
        Ok(FunctionCtx { module, func, types, geps, restored, opts, layout })
    }

    fn id(&self, op: &Operand) -> Option<ValueId> {
        match op {
            Operand::Local(n) => Some(ValueId::local(&self.func.name, n)),
            Operand::Symbol(s) if self.module.global(s).is_some() => Some(ValueId::Global(s.clone())),
            _ => None,
        }
    }

    fn level(&self, s: &FpSet, op: &Operand) -> Option<u8> {
        match op {
            Operand::Symbol(f) if self.module.function(f).is_some() => Some(0),
            _ => self.id(op).and_then(|v| s.get(&v)),
        }
    }

    fn set(&self, s: &mut FpSet, op: &Operand, level: u8, diags: &mut BTreeSet<String>) {
        if let Some(v) = self.id(op) {
            s.insert(v, level, diags);
        }
    }

    fn seed_by_type(&self, s: &mut FpSet, op: &Operand, diags: &mut BTreeSet<String>) {
        let Some(v) = self.id(op) else { return };
        let ty = match op {
            Operand::Local(n) => self.types.local(n).cloned(),
            _ => self.types.operand(self.module, op),
        };
        if let Some(level) = ty.as_ref().and_then(Type::fp_level) {
            s.insert(v, level, diags);
        }
    }

    /// Innermost (container, field) addressed by a gep, with the access
    /// width in bits of the addressed element.
    fn gep_leaf(&self, info: &GepInfo) -> Option<(String, u64, u64)> {
        let pos = info.steps.iter().rposition(|(t, _)| matches!(t, Type::Named(_)))?;
        let (Type::Named(container), idx) = &info.steps[pos] else { return None };
        let mut elem = info.result.pointee()?.clone();
        while let Type::Array(inner, _) = elem {
            elem = *inner;
        }
        Some((container.clone(), *idx, self.layout.size_of(&elem) * 8))
    }

    fn is_union(&self, name: &str) -> bool {
        self.module.typedef(name).is_some_and(|d| d.kind == AggregateKind::Union)
    }

    fn gep_is_fp_field(&self, info: &GepInfo, dag: &FieldDag) -> bool {
        let Some((container, idx, width)) = self.gep_leaf(info) else { return false };
        if self.is_union(&container) {
            if !self.opts.union_heuristic {
                return dag.is_leaf(&container, 0);
            }
            return union_field_is_fp(self.module, dag, &container, idx, width);
        }
        dag.is_leaf(&container, idx)
    }

    /// Records the field addressed by `info` as holding a function pointer.
    fn mark_field(&self, info: &GepInfo, dag: &mut FieldDag) {
        let Some((container, idx, width)) = self.gep_leaf(info) else { return };
        if self.is_union(&container) && self.opts.union_heuristic {
            let def = self.module.typedef(&container).expect("union exists");
            if def.fields[idx as usize].align != 8 || width != 64 {
                return;
            }
        }
        let collapse = !self.opts.union_heuristic;
        let steps: Vec<u64> = info.steps.iter().map(|(_, i)| *i).collect();
        let root = info.steps.first().map(|(t, _)| t.clone());
        if let Some(fp) = root.and_then(|t| type_path(self.module, &t, &steps, collapse)) {
            dag.add_path(self.module, fp);
        }
    }
}

/// Whether a union member is used as a function pointer: it must be 8-byte
/// aligned, accessed 64 bits wide, and recorded as a function pointer field.
pub fn union_field_is_fp(m: &Module, dag: &FieldDag, union: &str, field: u64, access_width: u64) -> bool {
    let Some(def) = m.typedef(union) else { return false };
    let Some(f) = def.fields.get(field as usize) else { return false };
    f.align == 8 && access_width == 64 && dag.is_leaf(union, field)
}

/// Applies the transfer function of one instruction.
pub fn analyze_inst(
    ctx: &FunctionCtx<'_>,
    inst: &Inst,
    s: &mut FpSet,
    dag: &mut FieldDag,
    diags: &mut BTreeSet<String>,
) {
    let ops = &inst.operands;
    let result = inst.result.as_ref().map(|r| Operand::Local(r.clone()));
    for op in ops.iter().chain(result.as_ref()) {
        ctx.seed_by_type(s, op, diags);
    }
    if let (Some(r), Some(info)) = (&result, inst.result.as_ref().and_then(|r| ctx.geps.get(r))) {
        if ctx.gep_is_fp_field(info, dag) {
            ctx.set(s, r, 1, diags);
        }
    }
    let same_level = |s: &mut FpSet, diags: &mut BTreeSet<String>, group: &[&Operand]| {
        if let Some(l) = group.iter().find_map(|o| ctx.level(s, o)) {
            for o in group {
                ctx.set(s, o, l, diags);
            }
        }
    };
    let store_like = |s: &mut FpSet, dag: &mut FieldDag, diags: &mut BTreeSet<String>, v: &Operand, a: &Operand| {
        if let Some(n) = ctx.level(s, v) {
            ctx.set(s, a, n + 1, diags);
            if n == 0 {
                if let Some(info) = a.local().and_then(|l| ctx.geps.get(l)) {
                    ctx.mark_field(info, dag);
                }
            }
        } else if let Some(m) = ctx.level(s, a).filter(|&m| m > 0) {
            ctx.set(s, v, m - 1, diags);
        }
    };
    let load_like = |s: &mut FpSet, diags: &mut BTreeSet<String>, r: &Operand, a: &Operand| {
        if let Some(n) = ctx.level(s, r) {
            ctx.set(s, a, n + 1, diags);
        } else if let Some(m) = ctx.level(s, a).filter(|&m| m > 0) {
            ctx.set(s, r, m - 1, diags);
        }
    };
    match inst.opcode {
        Opcode::Bitcast => {
            if let (Some(r), Some(v)) = (&result, ops.first()) {
                same_level(s, diags, &[v, r]);
            }
        }
        Opcode::Icmp => {
            if ops.iter().any(|o| o.local().is_some_and(|l| ctx.restored.contains(l))) {
                return;
            }
            if ops.iter().any(|o| ctx.level(s, o) == Some(0)) {
                for o in ops.iter().filter(|o| o.local().is_some()) {
                    ctx.set(s, o, 0, diags);
                }
            }
        }
        Opcode::Phi => {
            let mut group: Vec<&Operand> = ops.iter().collect();
            group.extend(result.as_ref());
            same_level(s, diags, &group);
        }
        Opcode::Store if ops.len() == 2 => store_like(s, dag, diags, &ops[0], &ops[1]),
        Opcode::Load => {
            if let (Some(r), Some(a)) = (&result, ops.first()) {
                load_like(s, diags, r, a);
            }
        }
        Opcode::CallPtr => {
            if let Some(callee) = ops.first() {
                ctx.set(s, callee, 0, diags);
            }
        }
        Opcode::Call => match inst.stub() {
            Some("pac_store") if ops.len() == 2 => {
                store_like(s, dag, diags, &ops[0], &ops[1]);
                ctx.set(s, &ops[0], 0, diags);
            }
            Some("pac_load") => {
                if let (Some(r), Some(a)) = (&result, ops.first()) {
                    ctx.set(s, r, 0, diags);
                    load_like(s, diags, r, a);
                }
            }
            Some("pac_call") => {
                for o in ops.iter().chain(result.as_ref()) {
                    ctx.set(s, o, 0, diags);
                }
            }
            Some("pac_const") => {
                if let Some(r) = &result {
                    ctx.set(s, r, 0, diags);
                }
            }
            Some("pb_restore") => {
                if let Some(o) = ops.first() {
                    ctx.set(s, o, 0, diags);
                }
            }
            Some(_) => {}
            None => {
                let Some(callee) = inst.callee.as_deref().and_then(|c| ctx.module.function(c)) else { return };
                for (arg, (pname, _)) in ops.iter().zip(&callee.params) {
                    if matches!(arg, Operand::Symbol(f) if ctx.module.function(f).is_some()) {
                        s.insert(ValueId::local(&callee.name, pname), 0, diags);
                    }
                }
            }
        },
        _ => {}
    }
}

/// One forward sweep followed by one backward sweep over the function.
pub fn analyze_function(ctx: &FunctionCtx<'_>, s: &mut FpSet, dag: &mut FieldDag, diags: &mut BTreeSet<String>) {
    for inst in ctx.func.insts() {
        analyze_inst(ctx, inst, s, dag, diags);
    }
    for block in ctx.func.blocks.iter().rev() {
        for inst in block.insts.iter().rev() {
            analyze_inst(ctx, inst, s, dag, diags);
        }
    }
}

pub fn analyze_module(m: &Module) -> Result<FpFacts, AnalysisError> {
    analyze_module_with(m, AnalysisOptions::default())
}

pub fn analyze_module_with(m: &Module, opts: AnalysisOptions) -> Result<FpFacts, AnalysisError> {
    let (mut set, sgi) = analyze_global_fp(m);
    let mut dag = analyze_struct(m, &sgi)?;
    let layout = Layout::new(m);
    let ctxs = m.functions.iter().map(|f| FunctionCtx::new(m, &layout, f, opts)).collect::<Result<Vec<_>, _>>()?;
    let mut diags = BTreeSet::new();
    let mut iterations = 0;
    loop {
        let before = (set.clone(), dag.clone());
        for ctx in &ctxs {
            analyze_function(ctx, &mut set, &mut dag, &mut diags);
        }
        iterations += 1;
        debug_assert!(set.is_superset_of(&before.0), "identified set shrank");
        if set == before.0 && dag == before.1 {
            break;
        }
    }
    for ctx in &ctxs {
        for (name, ty) in ctx.func.params.iter().map(|(n, t)| (n, t)).chain(
            ctx.func.insts().filter_map(|i| i.result.as_ref()).filter_map(|r| ctx.types.local(r).map(|t| (r, t))),
        ) {
            let v = ValueId::local(&ctx.func.name, name);
            if *ty == Type::I32 && set.get(&v) == Some(0) {
                diags.insert(format!("{v} is a 32-bit value identified as a function pointer"));
            }
        }
    }
    Ok(FpFacts { set, dag, sgi, diagnostics: diags.into_iter().collect(), iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn facts(src: &str) -> FpFacts {
        analyze_module(&parse_module(src).unwrap()).unwrap()
    }

    #[test]
    fn global_struct_initializer_seeds() {
        let m = parse_module(
            "type %fops = struct { open: void* @8 }\nglobal @ops : %fops = { @ptmx_open }\nfunc @ptmx_open() {\ne:\n  ret\n}\n",
        )
        .unwrap();
        let (set, sgi) = analyze_global_fp(&m);
        assert_eq!(set.get(&ValueId::Global("ops".into())), Some(1));
        assert!(sgi.paths.contains(&FieldPath { root: "fops".into(), path: vec![0] }));
    }

    #[test]
    fn struct_fields_and_cycles() {
        let m =
            parse_module("type %s = struct { a: i64 @8, b: i64 @8, c: i64 @8, f: fn() @8, next: %s* @8 }\n").unwrap();
        let dag = analyze_struct(&m, &GlobalInitSet::default()).unwrap();
        assert_eq!(dag.fp_paths.iter().map(|p| p.to_string()).collect::<Vec<_>>(), ["s 3"]);
        let cyc = parse_module("type %a = struct { b: %b @8 }\ntype %b = struct { a: %a @8 }\n").unwrap();
        assert!(matches!(analyze_struct(&cyc, &GlobalInitSet::default()), Err(AnalysisError::CyclicTypeDefinition(_))));
    }

    #[test]
    fn callptr_generates_and_backward_sweep_propagates() {
        let f = facts(
            "global @slot : i64 = 0\nfunc @main() {\ne:\n  %p = load i64, @slot\n  %q = bitcast %p to i64\n  callptr %q()\n  ret\n}\n",
        );
        assert_eq!(f.local_level("main", "q"), Some(0));
        assert_eq!(f.local_level("main", "p"), Some(0));
        assert_eq!(f.set.get(&ValueId::Global("slot".into())), Some(1));
    }

    #[test]
    fn no_fp_module_is_empty() {
        let f = facts("global @x : i64 = 3\nfunc @main() {\ne:\n  %a = load i64, @x\n  %b = add %a, 1\n  store %b, @x\n  ret\n}\n");
        assert!(f.set.is_empty() && f.dag.fp_paths.is_empty());
    }

    #[test]
    fn store_marks_field() {
        let f = facts(
            "type %bd = struct { holder: void* @8 }\nglobal @b : %bd = zeroinit\nfunc @g() {\ne:\n  ret\n}\nfunc @main() {\ne:\n  %p = gep @b, 0, 0\n  store @g, %p\n  ret\n}\n",
        );
        assert_eq!(f.local_level("main", "p"), Some(1));
        assert!(f.dag.fp_paths.contains(&FieldPath { root: "bd".into(), path: vec![0] }));
    }

    #[test]
    fn level_conflict_is_reported() {
        let f = facts(
            "global @s : i64 = 0\nfunc @main() {\ne:\n  %p = load i64, @s\n  callptr %p()\n  %q = load i64, %p\n  callptr %q()\n  ret\n}\n",
        );
        assert!(f.diagnostics.iter().any(|d| d.contains("both level")));
    }
}
