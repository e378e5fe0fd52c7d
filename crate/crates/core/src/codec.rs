//! Pointer encodings and the keyed PAC function.
//!
//! Every 64-bit word the simulated kernel treats as a code pointer is in one
//! of four forms:
//!
//! ```text
//!  raw kernel   | 1111111111111111111 |               offset[44:0]               |
//!  PACed        | 111111111111 | PAC[6:0] |            offset[44:0]             |
//!                 63        52   51    45  44                                 0
//!  piggyback    |   index[13:0]   | PAC[6:0] |     storage offset[44:2]        |
//!                 63            50  49     43  42                              0
//!  poisoned     | 1011111111111 ... (PACed word with bit 62 flipped)         |
//! ```
//!
//! Nothing outside this module builds or picks apart these bit patterns.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Base of the simulated kernel virtual region (19 sign bits set).
pub const KERNEL_BASE: u64 = 0xFFFF_E000_0000_0000;
/// Mask of the 45-bit offset inside the kernel region.
pub const OFFSET_MASK: u64 = (1 << 45) - 1;
/// Bits [51:45], where a PACed pointer carries its code.
pub const PAC_MASK: u64 = 0x7F << PAC_SHIFT;
pub const PAC_SHIFT: u32 = 45;

pub const PB_INDEX_SHIFT: u32 = 50;
pub const PB_PAC_SHIFT: u32 = 43;
pub const PB_ADDR_MASK: u64 = (1 << 43) - 1;

/// Largest function index a piggyback word may carry.
pub const MAX_FN_INDEX: u16 = 10_000;

/// Flipped on authentication failure; moves the word out of the canonical
/// kernel region and above the piggyback index range.
pub const POISON_BIT: u64 = 1 << 62;
const POISON_TOP12: u64 = 0xBFF;

/// Constant context used for boot-trusted and physical-address pointers.
/// It is the address whose piggyback address field is zero.
pub const CONST_CONTEXT: u64 = KERNEL_BASE;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// 128-bit PA key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Key128 {
    pub hi: u64,
    pub lo: u64,
}

impl Key128 {
    pub const fn new(hi: u64, lo: u64) -> Self {
        Key128 { hi, lo }
    }
}

/// A 7-bit pointer authentication code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pac7(u8);

impl Pac7 {
    pub const MAX: u8 = 0x7F;

    pub fn new(value: u8) -> Option<Pac7> {
        (value <= Self::MAX).then_some(Pac7(value))
    }

    /// Keeps the low seven bits.
    pub fn truncate(value: u64) -> Pac7 {
        Pac7((value & 0x7F) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// Dense 14-bit function index, valid in `1..=10000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FnIndex(u16);

impl FnIndex {
    pub fn new(index: u16) -> Option<FnIndex> {
        (1..=MAX_FN_INDEX).contains(&index).then_some(FnIndex(index))
    }

    pub fn get(self) -> u16 {
        self.0
    }
}

impl fmt::Display for FnIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A 64-bit word in one of the pointer forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PointerWord(pub u64);

impl PointerWord {
    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn class(self) -> PointerClass {
        classify(self.0)
    }

    /// Builds the raw kernel pointer at `offset` inside the kernel region.
    pub fn kernel(offset: u64) -> PointerWord {
        PointerWord(KERNEL_BASE | (offset & OFFSET_MASK))
    }

    pub fn embedded_pac(self) -> Pac7 {
        Pac7::truncate(self.0 >> PAC_SHIFT)
    }

    /// The word with its PAC field forced to all ones. For a PACed word this
    /// is the raw pointer it was built from.
    pub fn canonical(self) -> PointerWord {
        PointerWord(self.0 | PAC_MASK)
    }
}

impl fmt::Display for PointerWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointerClass {
    RawKernel,
    Paced,
    Piggyback,
    Poisoned,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("word {0:#018x} is not a raw kernel pointer")]
    NotRawPointer(u64),
    #[error("function at {0:#018x} is not registered in the index table")]
    UnregisteredFunction(u64),
    #[error("storage address {0:#018x} is not word aligned")]
    UnalignedAddress(u64),
    #[error("storage address {0:#018x} is outside the kernel offset region")]
    AddressOutOfRegion(u64),
    #[error("word {0:#018x} is not a piggyback pointer")]
    NotPiggyback(u64),
    #[error("function index {0} is not in the table")]
    UnknownIndex(u16),
    #[error("function table is full ({0} entries)")]
    TableFull(usize),
    #[error("duplicate function entry {0:#018x}")]
    DuplicateFunction(u64),
}

/// Full 64-bit output of the keyed mixer.
pub fn prf(key: Key128, pointer: u64, context: u64) -> u64 {
    let mut state = pointer ^ key.lo;
    for _ in 0..4 {
        state = state.wrapping_mul(GOLDEN).rotate_left(23) ^ context;
        state ^= key.hi;
        state = state.rotate_left(17).wrapping_add(key.lo);
    }
    state ^ (state >> 32)
}

/// Keyed MAC over (pointer, context), truncated to seven bits.
pub fn compute_pac(key: Key128, pointer: u64, context: u64) -> Pac7 {
    Pac7::truncate(prf(key, pointer, context))
}

fn is_raw_kernel(word: u64) -> bool {
    word >> PAC_SHIFT == (1 << 19) - 1 && word & 3 == 0
}

fn top12(word: u64) -> u64 {
    word >> 52
}

pub fn classify(word: u64) -> PointerClass {
    if is_raw_kernel(word) {
        PointerClass::RawKernel
    } else if top12(word) == 0xFFF {
        if word & 3 == 0 {
            PointerClass::Paced
        } else {
            PointerClass::Other
        }
    } else if top12(word) == POISON_TOP12 {
        PointerClass::Poisoned
    } else {
        let index = word >> PB_INDEX_SHIFT;
        if (1..=MAX_FN_INDEX as u64).contains(&index) {
            PointerClass::Piggyback
        } else {
            PointerClass::Other
        }
    }
}

/// `pacia` semantics: embed the PAC of the raw pointer under `context`.
pub fn sign(key: Key128, raw: PointerWord, context: u64) -> Result<PointerWord, CodecError> {
    if !is_raw_kernel(raw.0) {
        return Err(CodecError::NotRawPointer(raw.0));
    }
    let canonical = raw.canonical().0;
    let pac = compute_pac(key, canonical, context);
    Ok(PointerWord((canonical & !PAC_MASK) | (u64::from(pac.value()) << PAC_SHIFT)))
}

/// `autia` semantics. A mismatch yields the poisoned form instead of an
/// error; the fault only happens when the poisoned word is dereferenced.
pub fn authenticate(key: Key128, paced: PointerWord, context: u64) -> PointerWord {
    if top12(paced.0) == 0xFFF && paced.0 & 3 == 0 {
        let canonical = paced.canonical();
        if compute_pac(key, canonical.0, context) == paced.embedded_pac() {
            return canonical;
        }
    }
    poison(paced)
}

pub fn poison(word: PointerWord) -> PointerWord {
    PointerWord(word.0 ^ POISON_BIT)
}

/// Strips the PAC field without checking it (`xpaci`).
pub fn strip(word: PointerWord) -> PointerWord {
    word.canonical()
}

/// Bijection between registered function entries and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FnIndexTable {
    entries: Vec<(String, u64)>,
    by_addr: HashMap<u64, u16>,
}

impl FnIndexTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a function entry and returns its index.
    pub fn register(&mut self, symbol: impl Into<String>, entry: u64) -> Result<FnIndex, CodecError> {
        if !is_raw_kernel(entry) {
            return Err(CodecError::NotRawPointer(entry));
        }
        if self.by_addr.contains_key(&entry) {
            return Err(CodecError::DuplicateFunction(entry));
        }
        if self.entries.len() >= MAX_FN_INDEX as usize {
            return Err(CodecError::TableFull(self.entries.len()));
        }
        self.entries.push((symbol.into(), entry));
        let index = self.entries.len() as u16;
        self.by_addr.insert(entry, index);
        Ok(FnIndex(index))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: u16) -> Option<u64> {
        index.checked_sub(1).and_then(|i| self.entries.get(i as usize)).map(|(_, addr)| *addr)
    }

    pub fn symbol(&self, index: u16) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.entries.get(i as usize)).map(|(s, _)| s.as_str())
    }

    pub fn index_of(&self, entry: u64) -> Option<FnIndex> {
        self.by_addr.get(&entry).map(|&i| FnIndex(i))
    }

    pub fn index_of_symbol(&self, symbol: &str) -> Option<FnIndex> {
        self.entries.iter().position(|(s, _)| s == symbol).map(|i| FnIndex(i as u16 + 1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (FnIndex, &str, u64)> + '_ {
        self.entries.iter().enumerate().map(|(i, (s, a))| (FnIndex(i as u16 + 1), s.as_str(), *a))
    }

    /// `.fnidx` section body: `fnidx <index> <symbol>` per line.
    pub fn to_section(&self) -> String {
        let mut out = String::new();
        for (index, symbol, _) in self.iter() {
            out.push_str(&format!("fnidx {index} {symbol}\n"));
        }
        out
    }
}

fn check_storage(storage_addr: u64) -> Result<u64, CodecError> {
    if storage_addr & !OFFSET_MASK != KERNEL_BASE {
        return Err(CodecError::AddressOutOfRegion(storage_addr));
    }
    if storage_addr & 3 != 0 {
        return Err(CodecError::UnalignedAddress(storage_addr));
    }
    Ok(storage_addr & OFFSET_MASK)
}

/// Packs (function index, PAC, storage address) into one word.
pub fn encode_piggyback(
    table: &FnIndexTable,
    raw_fn: PointerWord,
    pac: Pac7,
    storage_addr: u64,
) -> Result<PointerWord, CodecError> {
    let index = table
        .index_of(raw_fn.canonical().0)
        .filter(|_| is_raw_kernel(raw_fn.canonical().0))
        .ok_or(CodecError::UnregisteredFunction(raw_fn.0))?;
    let offset = check_storage(storage_addr)?;
    Ok(PointerWord(
        (u64::from(index.get()) << PB_INDEX_SHIFT) | (u64::from(pac.value()) << PB_PAC_SHIFT) | (offset >> 2),
    ))
}

/// Splits a piggyback word into the PACed function pointer and the address
/// it was loaded from.
pub fn decode_piggyback(table: &FnIndexTable, pb: PointerWord) -> Result<(PointerWord, u64), CodecError> {
    let index = (pb.0 >> PB_INDEX_SHIFT) as u16;
    if index == 0 || index > MAX_FN_INDEX || top12(pb.0) == 0xFFF {
        return Err(if index == 0 { CodecError::UnknownIndex(0) } else { CodecError::NotPiggyback(pb.0) });
    }
    let entry = table.entry(index).ok_or(CodecError::UnknownIndex(index))?;
    let pac = (pb.0 >> PB_PAC_SHIFT) & 0x7F;
    let paced = (entry & !PAC_MASK) | (pac << PAC_SHIFT);
    let storage = KERNEL_BASE | ((pb.0 & PB_ADDR_MASK) << 2);
    Ok((PointerWord(paced), storage))
}

/// Strict matcher used when re-signing copied memory: the word must look
/// like a (possibly PACed) kernel pointer whose stripped value is a
/// registered function entry.
pub fn match_paced_fp(table: &FnIndexTable, word: u64) -> bool {
    matches!(classify(word), PointerClass::Paced | PointerClass::RawKernel) && table.index_of(word | PAC_MASK).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_with(n: usize) -> FnIndexTable {
        let mut t = FnIndexTable::new();
        for i in 0..n {
            t.register(format!("f{i}"), KERNEL_BASE | 0x10_0000 | (i as u64 * 16)).unwrap();
        }
        t
    }

    #[test]
    fn fixed_vector() {
        // Frozen from an independent script of the round function.
        assert_eq!(compute_pac(Key128::new(1, 2), 0x1000, 0x2000).value(), 31);
        assert_eq!(
            compute_pac(Key128::new(0xdead_beef, 0x1234), KERNEL_BASE | 0x10_0000, KERNEL_BASE | 0x80_0000).value(),
            96
        );
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(0xFFFF_E000_0000_1000), PointerClass::RawKernel);
        assert_eq!(classify(0x8), PointerClass::Other);
        assert_eq!(classify(0), PointerClass::Other);
        let t = table_with(1);
        let pb = encode_piggyback(&t, PointerWord(t.entry(1).unwrap()), Pac7::truncate(5), KERNEL_BASE | 0x80).unwrap();
        assert_eq!(classify(pb.0), PointerClass::Piggyback);
    }

    #[test]
    fn sign_rejects_non_raw() {
        let k = Key128::new(3, 4);
        assert_eq!(sign(k, PointerWord(0x10), 0), Err(CodecError::NotRawPointer(0x10)));
        let t = table_with(1);
        let pb = encode_piggyback(&t, PointerWord(t.entry(1).unwrap()), Pac7::truncate(0), KERNEL_BASE).unwrap();
        assert!(sign(k, pb, 0).is_err());
        let poisoned = poison(sign(k, PointerWord::kernel(0x100), 9).unwrap());
        assert!(sign(k, poisoned, 0).is_err());
    }

    #[test]
    fn wrong_context_poisons() {
        let k = Key128::new(0x1111, 0x2222);
        let raw = PointerWord::kernel(0x10_0040);
        let signed = sign(k, raw, KERNEL_BASE | 0x800).unwrap();
        assert_eq!(authenticate(k, signed, KERNEL_BASE | 0x800), raw);
        // Pick a context pair that does not collide under this key.
        let other = (1..)
            .map(|i| KERNEL_BASE | (0x800 + 8 * i))
            .find(|&c| compute_pac(k, raw.0, c) != signed.embedded_pac())
            .unwrap();
        let bad = authenticate(k, signed, other);
        assert_eq!(bad.class(), PointerClass::Poisoned);
        assert_eq!(bad.0 ^ POISON_BIT, signed.0);
    }

    #[test]
    fn pac_7f_aliases_raw_yet_authenticates() {
        // Brute-force a context whose PAC is 0x7F.
        let k = Key128::new(77, 78);
        let raw = PointerWord::kernel(0x10_0000);
        let ctx = (0u64..).map(|i| KERNEL_BASE | (i * 8)).find(|&c| compute_pac(k, raw.0, c).value() == 0x7F).unwrap();
        let signed = sign(k, raw, ctx).unwrap();
        assert_eq!(signed, raw);
        assert_eq!(signed.class(), PointerClass::RawKernel);
        assert_eq!(authenticate(k, signed, ctx), raw);
    }

    #[test]
    fn piggyback_layout_widths() {
        assert_eq!(64 - PB_INDEX_SHIFT + (PB_INDEX_SHIFT - PB_PAC_SHIFT) + PB_PAC_SHIFT, 64);
        assert_eq!(64 - PB_INDEX_SHIFT, 14);
        assert_eq!(PB_INDEX_SHIFT - PB_PAC_SHIFT, 7);
        assert_eq!(PB_PAC_SHIFT, 43);
    }

    #[test]
    fn piggyback_errors() {
        let t = table_with(2);
        let f = PointerWord(t.entry(1).unwrap());
        let p = Pac7::truncate(1);
        assert_eq!(
            encode_piggyback(&t, PointerWord::kernel(0x999_0000), p, KERNEL_BASE),
            Err(CodecError::UnregisteredFunction(PointerWord::kernel(0x999_0000).0))
        );
        assert_eq!(encode_piggyback(&t, f, p, KERNEL_BASE | 2), Err(CodecError::UnalignedAddress(KERNEL_BASE | 2)));
        assert_eq!(encode_piggyback(&t, f, p, 0x1000), Err(CodecError::AddressOutOfRegion(0x1000)));
        assert_eq!(decode_piggyback(&t, PointerWord(0x1234)), Err(CodecError::UnknownIndex(0)));
        assert_eq!(decode_piggyback(&t, PointerWord(3 << 50)), Err(CodecError::UnknownIndex(3)));
        assert!(matches!(decode_piggyback(&t, f), Err(CodecError::NotPiggyback(_))));
    }

    #[test]
    fn exhaustive_index_sweep_is_distinct_and_piggyback() {
        let mut t = table_with(MAX_FN_INDEX as usize);
        let pac = Pac7::truncate(0x55);
        let addr = KERNEL_BASE | 0x80_1000;
        let mut seen = std::collections::HashSet::new();
        for i in 1..=MAX_FN_INDEX {
            let w = encode_piggyback(&t, PointerWord(t.entry(i).unwrap()), pac, addr).unwrap();
            assert_eq!(classify(w.0), PointerClass::Piggyback, "index {i}");
            assert!(seen.insert(w.0));
        }
        assert!(t.register("overflow", KERNEL_BASE | 0x3F_0000).is_err());
    }

    #[test]
    fn fnidx_section_format() {
        let t = table_with(2);
        assert_eq!(t.to_section(), "fnidx 1 f0\nfnidx 2 f1\n");
    }

    #[test]
    fn strict_matcher() {
        let t = table_with(3);
        let k = Key128::new(5, 6);
        let signed = sign(k, PointerWord(t.entry(2).unwrap()), KERNEL_BASE | 0x800).unwrap();
        assert!(match_paced_fp(&t, signed.0));
        let data = sign(k, PointerWord::kernel(0x80_0000), KERNEL_BASE | 0x800).unwrap();
        assert!(!match_paced_fp(&t, data.0));
    }
}
