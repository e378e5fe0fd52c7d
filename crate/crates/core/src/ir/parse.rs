use std::collections::{HashMap, HashSet};

use super::{
    AggregateKind, Annotation, Block, Field, Function, GlobalVar, Init, Inst, IrError, Layout, Module, Opcode, Operand,
    Pred, Type, TypeDef, ValueTypes,
};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Local(String),
    Sym(String),
    Align(u64),
    Int(i64),
    Word(String),
    Punct(char),
    Arrow,
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$')
}

fn lex(line: &str, lineno: usize) -> Result<Vec<Tok>, IrError> {
    let err = |msg: String| IrError::SyntaxError { line: lineno, msg };
    let chars: Vec<char> = line.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    let take_name = |i: &mut usize| {
        let start = *i;
        while *i < chars.len() && is_name_char(chars[*i]) {
            *i += 1;
        }
        chars[start..*i].iter().collect::<String>()
    };
    while i < chars.len() {
        let c = chars[i];
        match c {
            ';' => break,
            c if c.is_whitespace() => i += 1,
            '%' | '@' => {
                i += 1;
                let name = take_name(&mut i);
                if name.is_empty() {
                    return Err(err(format!("expected a name after `{c}`")));
                }
                toks.push(match c {
                    '@' if name.bytes().all(|b| b.is_ascii_digit()) => {
                        Tok::Align(name.parse().map_err(|_| err(format!("bad alignment `{name}`")))?)
                    }
                    '@' => Tok::Sym(name),
                    _ => Tok::Local(name),
                });
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                toks.push(Tok::Arrow);
                i += 2;
            }
            '-' | '0'..='9' => {
                let neg = c == '-';
                if neg {
                    i += 1;
                }
                let text = take_name(&mut i);
                let value = if let Some(hex) = text.strip_prefix("0x") {
                    u64::from_str_radix(&hex.replace('_', ""), 16).map(|v| v as i64)
                } else {
                    text.replace('_', "").parse::<i64>()
                }
                .map_err(|_| err(format!("bad integer `{text}`")))?;
                toks.push(Tok::Int(if neg { value.wrapping_neg() } else { value }));
            }
            '(' | ')' | '[' | ']' | '{' | '}' | ',' | '=' | ':' | '*' => {
                toks.push(Tok::Punct(c));
                i += 1;
            }
            c if is_name_char(c) => toks.push(Tok::Word(take_name(&mut i))),
            other => return Err(err(format!("unexpected character `{other}`"))),
        }
    }
    Ok(toks)
}

struct Cursor {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl Cursor {
    fn err(&self, msg: impl Into<String>) -> IrError {
        IrError::SyntaxError { line: self.line, msg: msg.into() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), IrError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`, found {}", self.describe())))
        }
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Word(x)) if x == w) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn describe(&self) -> String {
        match self.peek() {
            None => "end of line".into(),
            Some(t) => format!("{t:?}"),
        }
    }

    fn word(&mut self) -> Result<String, IrError> {
        match self.next() {
            Some(Tok::Word(w)) => Ok(w),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected a name, found {}", self.describe())))
            }
        }
    }

    fn local(&mut self) -> Result<String, IrError> {
        match self.next() {
            Some(Tok::Local(w)) => Ok(w),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected a %local, found {}", self.describe())))
            }
        }
    }

    fn sym(&mut self) -> Result<String, IrError> {
        match self.next() {
            Some(Tok::Sym(w)) => Ok(w),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected an @symbol, found {}", self.describe())))
            }
        }
    }

    fn int(&mut self) -> Result<i64, IrError> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(v),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected an integer, found {}", self.describe())))
            }
        }
    }

    fn finish(&self) -> Result<(), IrError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.err(format!("trailing input {}", self.describe())))
        }
    }

    fn ty(&mut self) -> Result<Type, IrError> {
        let mut t = self.base_ty()?;
        while self.eat('*') {
            t = Type::ptr(t);
        }
        Ok(t)
    }

    /// A type without pointer suffixes; `fn()->i64*` reads as a pointer to
    /// a function pointer.
    fn base_ty(&mut self) -> Result<Type, IrError> {
        Ok(match self.next() {
            Some(Tok::Word(w)) => match w.as_str() {
                "i32" => Type::I32,
                "i64" => Type::I64,
                "void" => {
                    self.expect('*')?;
                    Type::VoidPtr
                }
                "fn" => {
                    self.expect('(')?;
                    let mut params = Vec::new();
                    if !self.eat(')') {
                        loop {
                            params.push(self.ty()?.to_string());
                            if self.eat(')') {
                                break;
                            }
                            self.expect(',')?;
                        }
                    }
                    let ret = if self.peek() == Some(&Tok::Arrow) {
                        self.pos += 1;
                        Some(self.base_ty()?)
                    } else {
                        None
                    };
                    Type::FnPtr(super::signature_text(&params, ret.as_ref()))
                }
                other => return Err(self.err(format!("unknown type `{other}`"))),
            },
            Some(Tok::Local(n)) => Type::Named(n),
            Some(Tok::Punct('[')) => {
                let n = self.int()?;
                if !self.eat_word("x") {
                    return Err(self.err("expected `x` in array type"));
                }
                let elem = self.ty()?;
                self.expect(']')?;
                let n = u64::try_from(n).map_err(|_| self.err("negative array length"))?;
                Type::Array(Box::new(elem), n)
            }
            _ => {
                self.pos -= 1;
                return Err(self.err(format!("expected a type, found {}", self.describe())));
            }
        })
    }

    fn operand(&mut self) -> Result<Operand, IrError> {
        match self.next() {
            Some(Tok::Local(n)) => Ok(Operand::Local(n)),
            Some(Tok::Sym(n)) => Ok(Operand::Symbol(n)),
            Some(Tok::Int(v)) => Ok(Operand::Int(v)),
            Some(Tok::Word(w)) if w == "null" => Ok(Operand::Null),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected an operand, found {}", self.describe())))
            }
        }
    }

    fn operand_list(&mut self, close: Option<char>) -> Result<Vec<Operand>, IrError> {
        let mut ops = Vec::new();
        if let Some(c) = close {
            if self.eat(c) {
                return Ok(ops);
            }
        } else if self.at_end() || self.annotation_next() {
            return Ok(ops);
        }
        loop {
            ops.push(self.operand()?);
            if let Some(c) = close {
                if self.eat(c) {
                    return Ok(ops);
                }
            } else if !matches!(self.peek(), Some(Tok::Punct(','))) {
                return Ok(ops);
            }
            self.expect(',')?;
        }
    }

    fn annotation_next(&self) -> bool {
        matches!(self.peek(), Some(Tok::Sym(s)) if s == "constant_ctx" || s == "phys")
            && self.pos + 1 == self.toks.len()
    }

    fn annotation(&mut self) -> Option<Annotation> {
        if !self.annotation_next() {
            return None;
        }
        match self.next() {
            Some(Tok::Sym(s)) if s == "constant_ctx" => Some(Annotation::ConstantCtx),
            _ => Some(Annotation::Phys),
        }
    }

    fn init(&mut self) -> Result<Init, IrError> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(Init::Int(v)),
            Some(Tok::Sym(s)) => Ok(Init::Symbol(s)),
            Some(Tok::Word(w)) if w == "null" => Ok(Init::Null),
            Some(Tok::Word(w)) if w == "zeroinit" => Ok(Init::Zero),
            Some(Tok::Punct(open @ ('{' | '['))) => {
                let close = if open == '{' { '}' } else { ']' };
                if open == '{' && matches!(self.peek_at(1), Some(Tok::Punct('='))) {
                    let member = self.word()?;
                    self.expect('=')?;
                    let inner = self.init()?;
                    self.expect('}')?;
                    return Ok(Init::Member(member, Box::new(inner)));
                }
                let mut items = Vec::new();
                if !self.eat(close) {
                    loop {
                        items.push(self.init()?);
                        if self.eat(close) {
                            break;
                        }
                        self.expect(',')?;
                    }
                }
                Ok(Init::Aggregate(items))
            }
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected an initializer, found {}", self.describe())))
            }
        }
    }
}

fn parse_typedef(c: &mut Cursor) -> Result<TypeDef, IrError> {
    let name = c.local()?;
    c.expect('=')?;
    let kind = match c.word()?.as_str() {
        "struct" => AggregateKind::Struct,
        "union" => AggregateKind::Union,
        other => return Err(c.err(format!("expected struct or union, found `{other}`"))),
    };
    c.expect('{')?;
    let mut fields = Vec::new();
    if !c.eat('}') {
        loop {
            let fname = c.word()?;
            c.expect(':')?;
            let ty = c.ty()?;
            let align = match c.peek() {
                Some(Tok::Align(a)) => {
                    let a = *a;
                    c.pos += 1;
                    a
                }
                _ => match ty {
                    Type::I32 => 4,
                    _ => 8,
                },
            };
            fields.push(Field { name: fname, ty, align });
            if c.eat('}') {
                break;
            }
            c.expect(',')?;
        }
    }
    c.finish()?;
    Ok(TypeDef { name, kind, fields })
}

fn parse_global(c: &mut Cursor) -> Result<GlobalVar, IrError> {
    let name = c.sym()?;
    c.expect(':')?;
    let ty = c.ty()?;
    c.expect('=')?;
    let init = c.init()?;
    let annotation = c.annotation();
    c.finish()?;
    Ok(GlobalVar { name, ty, init, annotation })
}

fn parse_func_header(c: &mut Cursor) -> Result<Function, IrError> {
    let name = c.sym()?;
    c.expect('(')?;
    let mut params = Vec::new();
    if !c.eat(')') {
        loop {
            let p = c.local()?;
            c.expect(':')?;
            params.push((p, c.ty()?));
            if c.eat(')') {
                break;
            }
            c.expect(',')?;
        }
    }
    let ret = if c.peek() == Some(&Tok::Arrow) {
        c.pos += 1;
        Some(c.ty()?)
    } else {
        None
    };
    let init_text = c.eat_word("init_text");
    c.expect('{')?;
    c.finish()?;
    Ok(Function { name, params, ret, init_text, blocks: Vec::new() })
}

fn parse_inst(c: &mut Cursor) -> Result<Inst, IrError> {
    let result = if matches!(c.peek(), Some(Tok::Local(_))) && c.peek_at(1) == Some(&Tok::Punct('=')) {
        let r = c.local()?;
        c.expect('=')?;
        Some(r)
    } else {
        None
    };
    let mnemonic = c.word()?;
    let opcode = Opcode::from_mnemonic(&mnemonic).ok_or_else(|| c.err(format!("unknown opcode `{mnemonic}`")))?;
    let mut inst = Inst::new(opcode, Vec::new());
    inst.result = result;
    match opcode {
        Opcode::Load => {
            let starts_operand = !c.toks[c.pos..].contains(&Tok::Punct(','));
            if !starts_operand {
                inst.ty = Some(c.ty()?);
                c.expect(',')?;
            }
            inst.operands = c.operand_list(None)?;
        }
        Opcode::Bitcast => {
            inst.operands = vec![c.operand()?];
            if c.eat_word("to") {
                inst.ty = Some(c.ty()?);
            }
        }
        Opcode::Icmp => {
            let p = c.word()?;
            inst.pred = Some(Pred::from_keyword(&p).ok_or_else(|| c.err(format!("unknown predicate `{p}`")))?);
            inst.operands = c.operand_list(None)?;
        }
        Opcode::Phi => loop {
            c.expect('[')?;
            inst.operands.push(c.operand()?);
            c.expect(',')?;
            inst.targets.push(c.word()?);
            c.expect(']')?;
            if !c.eat(',') {
                break;
            }
        },
        Opcode::Call => {
            if !matches!(c.peek(), Some(Tok::Sym(_))) {
                inst.ty = Some(c.ty()?);
            }
            inst.callee = Some(c.sym()?);
            c.expect('(')?;
            inst.operands = c.operand_list(Some(')'))?;
        }
        Opcode::CallPtr => {
            let callee = c.operand()?;
            c.expect('(')?;
            let mut ops = vec![callee];
            ops.extend(c.operand_list(Some(')'))?);
            inst.operands = ops;
            if c.eat(':') {
                inst.ty = Some(c.ty()?);
            }
        }
        Opcode::Br => {
            while !c.at_end() {
                match c.peek() {
                    Some(Tok::Word(_)) => {
                        let w = c.word()?;
                        inst.targets.push(w);
                    }
                    _ => inst.operands.push(c.operand()?),
                }
                if !c.eat(',') {
                    break;
                }
            }
        }
        _ => inst.operands = c.operand_list(None)?,
    }
    inst.annotation = c.annotation();
    c.finish()?;
    Ok(inst)
}

/// Parses IR text into a resolved module with `address_taken` populated.
pub fn parse_module(text: &str) -> Result<Module, IrError> {
    let mut module = Module::default();
    let mut current: Option<(Function, usize)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let toks = lex(raw, line)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor { toks, pos: 0, line };
        if let Some((func, _)) = current.as_mut() {
            if c.toks == [Tok::Punct('}')] {
                let (func, _) = current.take().expect("inside function");
                module.functions.push(func);
                continue;
            }
            if let [Tok::Word(label), Tok::Punct(':')] = c.toks.as_slice() {
                func.blocks.push(Block { label: label.clone(), insts: Vec::new() });
                continue;
            }
            let inst = parse_inst(&mut c)?;
            match func.blocks.last_mut() {
                Some(b) => b.insts.push(inst),
                None => return Err(c.err("instruction before the first block label")),
            }
            continue;
        }
        match c.next() {
            Some(Tok::Word(w)) if w == "type" => module.types.push(parse_typedef(&mut c)?),
            Some(Tok::Word(w)) if w == "global" => module.globals.push(parse_global(&mut c)?),
            Some(Tok::Word(w)) if w == "func" => current = Some((parse_func_header(&mut c)?, line)),
            _ => return Err(c.err("expected `type`, `global` or `func`")),
        }
    }
    if let Some((func, line)) = current {
        return Err(IrError::SyntaxError { line, msg: format!("function @{} is not closed", func.name) });
    }
    resolve(&module)?;
    module.recompute_address_taken();
    Ok(module)
}

fn resolve(m: &Module) -> Result<(), IrError> {
    let mut seen = HashSet::new();
    for t in &m.types {
        if !seen.insert(t.name.as_str()) {
            return Err(IrError::TypeMismatch(format!("duplicate type %{}", t.name)));
        }
    }
    let mut symbols = HashSet::new();
    for name in m.globals.iter().map(|g| &g.name).chain(m.functions.iter().map(|f| &f.name)) {
        if !symbols.insert(name.as_str()) || super::is_intrinsic(name) {
            return Err(IrError::TypeMismatch(format!("duplicate symbol @{name}")));
        }
    }
    let check_type = |t: &Type| check_named(m, t);
    for t in &m.types {
        t.fields.iter().try_for_each(|f| check_type(&f.ty))?;
    }
    let layout = Layout::new(m);
    for g in &m.globals {
        check_type(&g.ty)?;
        check_init(m, &g.ty, &g.init, &g.name)?;
    }
    for f in &m.functions {
        for (_, t) in &f.params {
            check_type(t)?;
        }
        if let Some(t) = &f.ret {
            check_type(t)?;
        }
        let labels: HashSet<&str> = f.blocks.iter().map(|b| b.label.as_str()).collect();
        if labels.len() != f.blocks.len() {
            return Err(IrError::TypeMismatch(format!("duplicate block label in @{}", f.name)));
        }
        let mut defined: HashMap<&str, ()> = f.params.iter().map(|(n, _)| (n.as_str(), ())).collect();
        for inst in f.insts() {
            if let Some(r) = &inst.result {
                if defined.insert(r, ()).is_some() {
                    return Err(IrError::TypeMismatch(format!("%{r} defined twice in @{}", f.name)));
                }
            }
            if let Some(t) = &inst.ty {
                check_type(t)?;
            }
        }
        for inst in f.insts() {
            for op in &inst.operands {
                match op {
                    Operand::Local(n) if !defined.contains_key(n.as_str()) => {
                        return Err(IrError::UnresolvedSymbol(format!("%{n} in @{}", f.name)))
                    }
                    Operand::Symbol(s) if !symbols.contains(s.as_str()) => {
                        return Err(IrError::UnresolvedSymbol(format!("@{s}")))
                    }
                    _ => {}
                }
            }
            if let Some(callee) = &inst.callee {
                if m.function(callee).is_none() && !super::is_intrinsic(callee) {
                    return Err(IrError::UnresolvedSymbol(format!("@{callee}")));
                }
            }
            if let Some(t) = inst.targets.iter().find(|t| !labels.contains(t.as_str())) {
                return Err(IrError::UnresolvedSymbol(format!("block `{t}` in @{}", f.name)));
            }
        }
        ValueTypes::compute(m, &layout, f)?;
    }
    Ok(())
}

fn check_named(m: &Module, t: &Type) -> Result<(), IrError> {
    match t {
        Type::Named(n) if m.typedef(n).is_none() => Err(IrError::UnresolvedSymbol(format!("%{n}"))),
        Type::Ptr(inner) | Type::Array(inner, _) => check_named(m, inner),
        _ => Ok(()),
    }
}

fn check_init(m: &Module, ty: &Type, init: &Init, global: &str) -> Result<(), IrError> {
    let mismatch = || IrError::TypeMismatch(format!("initializer of @{global} does not match {ty}"));
    match init {
        Init::Zero => Ok(()),
        Init::Int(_) | Init::Null => match ty {
            Type::I32 | Type::I64 | Type::VoidPtr | Type::Ptr(_) | Type::FnPtr(_) => Ok(()),
            _ => Err(mismatch()),
        },
        Init::Symbol(s) => {
            if m.function(s).is_none() && m.global(s).is_none() {
                return Err(IrError::UnresolvedSymbol(format!("@{s}")));
            }
            match ty {
                Type::I64 | Type::VoidPtr | Type::Ptr(_) | Type::FnPtr(_) => Ok(()),
                _ => Err(mismatch()),
            }
        }
        Init::Aggregate(items) => match ty {
            Type::Array(elem, n) if items.len() as u64 <= *n => {
                items.iter().try_for_each(|i| check_init(m, elem, i, global))
            }
            Type::Named(name) => {
                let def = m.typedef(name).ok_or_else(mismatch)?;
                if def.kind != AggregateKind::Struct || items.len() > def.fields.len() {
                    return Err(mismatch());
                }
                items.iter().zip(&def.fields).try_for_each(|(i, f)| check_init(m, &f.ty, i, global))
            }
            _ => Err(mismatch()),
        },
        Init::Member(member, inner) => {
            let Type::Named(name) = ty else { return Err(mismatch()) };
            let def = m.typedef(name).ok_or_else(mismatch)?;
            let field = def.fields.iter().find(|f| &f.name == member).ok_or_else(mismatch)?;
            check_init(m, &field.ty, inner, global)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_module() {
        let m = parse_module("; nothing here\n\n").unwrap();
        assert!(m.functions.is_empty() && m.globals.is_empty());
    }

    #[test]
    fn global_fn_initializer_is_address_taken() {
        let m = parse_module("global @g : fn() = @f\nfunc @f() {\nentry:\n  ret\n}\n").unwrap();
        assert_eq!(m.globals[0].name, "g");
        assert!(m.address_taken.contains("f"));
    }

    #[test]
    fn parses_every_instruction_form() {
        let src = "\
type %ops = struct { open: fn(i64)->i64 @8, n: i32 @4 }
global @tab : %ops = { @open, 3 }
global @raw : [2 x i64] = [1, 0x10] @constant_ctx
func @open(%x: i64) -> i64 {
entry:
  ret %x
}
func @main() {
entry:
  %p = gep @tab, 0, 0
  %f = load fn(i64)->i64, %p
  %c = icmp ne %f, null
  br %c, call, done
call:
  %r = callptr %f(7)
  %b = bitcast %f to void*
  store %f, %p
  memcpy %p, %p, 8
  br done
done:
  %m = phi [0, entry], [%r, call]
  %s = call i64 @open(%m)
  ret
}
";
        let m = parse_module(src).unwrap();
        assert_eq!(m.functions[1].inst_count(), 12);
        assert_eq!(m.globals[1].annotation, Some(Annotation::ConstantCtx));
        assert!(m.address_taken.contains("open"));
        let again = parse_module(&m.to_string()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn reports_errors() {
        assert!(matches!(parse_module("func @f() {\nentry:\n  frob\n}\n"), Err(IrError::SyntaxError { line: 3, .. })));
        assert!(matches!(
            parse_module("func @f() {\nentry:\n  call @nope()\n  ret\n}\n"),
            Err(IrError::UnresolvedSymbol(_))
        ));
        assert!(matches!(parse_module("global @g : i64 = { 1 }\n"), Err(IrError::TypeMismatch(_))));
        assert!(matches!(
            parse_module("func @f() {\nentry:\n  store %x, @f\n  ret\n}\n"),
            Err(IrError::UnresolvedSymbol(_))
        ));
    }

    #[test]
    fn union_member_initializer() {
        let src =
            "type %u = union { pad: i32 @4, fun: fn() @8 }\nglobal @x : %u = { fun = @f }\nfunc @f() {\ne:\n  ret\n}\n";
        let m = parse_module(src).unwrap();
        assert_eq!(m.globals[0].init, Init::Member("fun".into(), Box::new(Init::Symbol("f".into()))));
    }
}
