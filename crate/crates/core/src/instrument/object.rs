use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::BuildOptions;
use crate::codec::{CodecError, FnIndexTable};
use crate::isa::memmap::{self, DATA_BASE, FNIDX_BASE, FNREV_BASE};
use crate::isa::MInst;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unresolved symbol `{0}`")]
    Unresolved(String),
    #[error("patch record {0}+{1} is not an aligned cell of the data image")]
    BadPatch(String, u64),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSymbol {
    pub name: String,
    pub offset: u64,
    pub size: u64,
}

/// An 8-byte cell that receives the absolute address of `symbol` at load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reloc {
    pub offset: u64,
    pub symbol: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataImage {
    pub bytes: Vec<u8>,
    pub symbols: Vec<DataSymbol>,
    pub relocs: Vec<Reloc>,
}

impl DataImage {
    pub fn symbol(&self, name: &str) -> Option<&DataSymbol> {
        self.symbols.iter().find(|s| s.name == name)
    }
}

/// A statically initialized function pointer cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub global: String,
    pub offset: u64,
    /// Signature of the pointer type, used as context in type-context builds.
    pub sig: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineProgram {
    pub text: Vec<MInst>,
    /// Label to instruction index. Function entries are `@name`.
    pub labels: BTreeMap<String, usize>,
    pub data: DataImage,
    /// Registered functions in index order (index = position + 1).
    pub fnidx: Vec<String>,
    pub patches: Vec<PatchRecord>,
    /// Instruction index ranges `[start, end)` unmapped after boot.
    pub init_text: Vec<(usize, usize)>,
    pub opts: BuildOptions,
}

/// Contiguous span of one function in the text image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl MachineProgram {
    pub fn label_addr(&self, label: &str) -> Option<u64> {
        self.labels.get(label).map(|&i| memmap::text_addr(i))
    }

    /// Absolute address of `@name`: a function entry, a global, or one of the
    /// runtime tables.
    pub fn symbol_addr(&self, sym: &str) -> Option<u64> {
        match sym {
            "@__fnidx" => return Some(FNIDX_BASE),
            "@__fnrev" => return Some(FNREV_BASE),
            _ => {}
        }
        if let Some(a) = self.label_addr(sym) {
            return Some(a);
        }
        let name = sym.strip_prefix('@')?;
        self.data.symbol(name).map(|s| DATA_BASE + s.offset)
    }

    pub fn fn_index_table(&self) -> Result<FnIndexTable, ObjectError> {
        let mut t = FnIndexTable::new();
        for name in &self.fnidx {
            let addr = self.label_addr(&format!("@{name}")).ok_or_else(|| ObjectError::Unresolved(name.clone()))?;
            t.register(name.clone(), addr)?;
        }
        Ok(t)
    }

    pub fn functions(&self) -> Vec<FunctionRange> {
        let mut starts: Vec<(usize, &str)> =
            self.labels.iter().filter_map(|(l, &i)| l.strip_prefix('@').map(|n| (i, n))).collect();
        starts.sort();
        let mut out = Vec::new();
        for (k, &(start, name)) in starts.iter().enumerate() {
            let end = starts.get(k + 1).map_or(self.text.len(), |s| s.0);
            out.push(FunctionRange { name: name.to_string(), start, end });
        }
        out
    }

    pub fn function_at(&self, index: usize) -> Option<FunctionRange> {
        self.functions().into_iter().find(|f| (f.start..f.end).contains(&index))
    }

    /// Bytes occupied by text, data and the function index table.
    pub fn image_size(&self) -> u64 {
        4 * self.text.len() as u64 + self.data.bytes.len() as u64 + 8 * (self.fnidx.len() as u64 + 1)
    }

    /// Checks that every reference resolves and every patch is a data cell.
    pub fn check(&self) -> Result<(), ObjectError> {
        for inst in &self.text {
            match inst {
                MInst::B { target } | MInst::BCond { target, .. } | MInst::Bl { target } => {
                    if !self.labels.contains_key(target) {
                        return Err(ObjectError::Unresolved(target.clone()));
                    }
                }
                MInst::Adrp { sym, .. } if self.symbol_addr(sym).is_none() => {
                    return Err(ObjectError::Unresolved(sym.clone()));
                }
                _ => {}
            }
        }
        for r in &self.data.relocs {
            if self.symbol_addr(&r.symbol).is_none() {
                return Err(ObjectError::Unresolved(r.symbol.clone()));
            }
        }
        for p in &self.patches {
            let ok = self
                .data
                .symbol(&p.global)
                .is_some_and(|s| p.offset % 8 == 0 && p.offset + 8 <= s.size && (s.offset + p.offset) % 8 == 0);
            if !ok {
                return Err(ObjectError::BadPatch(p.global.clone(), p.offset));
            }
        }
        self.fn_index_table()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let o = &self.opts;
        let flags = [
            if o.pa { "pa" } else { "nopa" },
            if o.legacy_ret { "legacy_ret" } else { "retaa" },
            if o.load_auth { "load_auth" } else { "no_load_auth" },
            if o.compat_type_ctx { "type_ctx" } else { "addr_ctx" },
        ];
        let _ = writeln!(out, ".flags {}", flags.join(" "));
        out.push_str(".text\n");
        let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (l, &i) in &self.labels {
            by_index.entry(i).or_default().push(l);
        }
        for (i, inst) in self.text.iter().enumerate() {
            if let Some(ls) = by_index.get(&i) {
                // Function labels first, then local labels.
                let mut ls = ls.clone();
                ls.sort_by_key(|l| (!l.starts_with('@'), *l));
                for l in ls {
                    let _ = writeln!(out, "{l}:");
                }
            }
            let _ = writeln!(out, "  {inst}");
        }
        if let Some(ls) = by_index.get(&self.text.len()) {
            for l in ls {
                let _ = writeln!(out, "{l}:");
            }
        }
        out.push_str(".data\n");
        for s in &self.data.symbols {
            let _ = writeln!(out, "sym @{} {} {}", s.name, s.offset, s.size);
        }
        for (k, chunk) in self.data.bytes.chunks(16).enumerate() {
            let hex: String = chunk.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(out, "hex {} {hex}", k * 16);
        }
        for r in &self.data.relocs {
            let _ = writeln!(out, "reloc {} {}", r.offset, r.symbol);
        }
        out.push_str(".fnidx\n");
        for (k, name) in self.fnidx.iter().enumerate() {
            let _ = writeln!(out, "fnidx {} {name}", k + 1);
        }
        out.push_str(".patch\n");
        for p in &self.patches {
            match &p.sig {
                Some(sig) => writeln!(out, "patch @{} {} {sig}", p.global, p.offset),
                None => writeln!(out, "patch @{} {}", p.global, p.offset),
            }
            .ok();
        }
        out.push_str(".inittext\n");
        for (a, b) in &self.init_text {
            let _ = writeln!(out, "range {a} {b}");
        }
        out
    }

    pub fn parse(src: &str) -> Result<MachineProgram, ObjectError> {
        let mut p = MachineProgram {
            text: Vec::new(),
            labels: BTreeMap::new(),
            data: DataImage::default(),
            fnidx: Vec::new(),
            patches: Vec::new(),
            init_text: Vec::new(),
            opts: BuildOptions::default(),
        };
        let mut section = "";
        for (n, raw) in src.lines().enumerate() {
            let line_no = n + 1;
            let err = |msg: String| ObjectError::Syntax { line: line_no, msg };
            let line = raw.split(';').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix(".flags") {
                for f in rest.split_whitespace() {
                    match f {
                        "pa" => p.opts.pa = true,
                        "nopa" => p.opts.pa = false,
                        "legacy_ret" => p.opts.legacy_ret = true,
                        "retaa" => p.opts.legacy_ret = false,
                        "load_auth" => p.opts.load_auth = true,
                        "no_load_auth" => p.opts.load_auth = false,
                        "type_ctx" => p.opts.compat_type_ctx = true,
                        "addr_ctx" => p.opts.compat_type_ctx = false,
                        other => return Err(err(format!("unknown flag `{other}`"))),
                    }
                }
                continue;
            }
            if line.starts_with('.') {
                section = match line {
                    ".text" | ".data" | ".fnidx" | ".patch" | ".inittext" => line,
                    _ => return Err(err(format!("unknown section `{line}`"))),
                };
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<u64, ObjectError> {
                words.get(i).and_then(|w| w.parse().ok()).ok_or_else(|| err(format!("expected a number in `{line}`")))
            };
            let word = |i: usize| -> Result<&str, ObjectError> {
                words.get(i).copied().ok_or_else(|| err(format!("missing field in `{line}`")))
            };
            match section {
                ".text" => {
                    if let Some(label) = line.strip_suffix(':') {
                        p.labels.insert(label.to_string(), p.text.len());
                    } else {
                        p.text.push(line.parse().map_err(err)?);
                    }
                }
                ".data" => match words[0] {
                    "sym" => p.data.symbols.push(DataSymbol {
                        name: word(1)?.trim_start_matches('@').to_string(),
                        offset: num(2)?,
                        size: num(3)?,
                    }),
                    "hex" => {
                        let off = num(1)? as usize;
                        let hex = word(2)?;
                        if hex.len() % 2 != 0 {
                            return Err(err("odd hex length".into()));
                        }
                        let bytes = (0..hex.len())
                            .step_by(2)
                            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
                            .collect::<Result<Vec<u8>, _>>()
                            .map_err(|_| err(format!("bad hex `{hex}`")))?;
                        if p.data.bytes.len() < off + bytes.len() {
                            p.data.bytes.resize(off + bytes.len(), 0);
                        }
                        p.data.bytes[off..off + bytes.len()].copy_from_slice(&bytes);
                    }
                    "reloc" => p.data.relocs.push(Reloc { offset: num(1)?, symbol: word(2)?.to_string() }),
                    other => return Err(err(format!("unknown data directive `{other}`"))),
                },
                ".fnidx" => {
                    if words[0] != "fnidx" || num(1)? as usize != p.fnidx.len() + 1 {
                        return Err(err(format!("bad fnidx line `{line}`")));
                    }
                    p.fnidx.push(word(2)?.to_string());
                }
                ".patch" => {
                    if words[0] != "patch" {
                        return Err(err(format!("bad patch line `{line}`")));
                    }
                    p.patches.push(PatchRecord {
                        global: word(1)?.trim_start_matches('@').to_string(),
                        offset: num(2)?,
                        sig: words.get(3).map(|s| s.to_string()),
                    });
                }
                ".inittext" => {
                    if words[0] != "range" {
                        return Err(err(format!("bad range line `{line}`")));
                    }
                    p.init_text.push((num(1)? as usize, num(2)? as usize));
                }
                _ => return Err(err("content outside a section".into())),
            }
        }
        p.check()?;
        Ok(p)
    }
}
