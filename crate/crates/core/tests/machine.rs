use std::fs;
use std::path::Path;

use pacter_core::codec::{authenticate, classify, strip, PointerClass, PointerWord};
use pacter_core::instrument::{self, BuildOptions, MachineProgram};
use pacter_core::ir::parse_module;
use pacter_core::machine::{boot, boot_with, run_program, MachineConfig, MachineError, MachineState, TrapKind};

fn program(name: &str, opts: BuildOptions) -> MachineProgram {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(format!("{name}.ir"));
    let m = parse_module(&fs::read_to_string(path).unwrap()).unwrap();
    instrument::build(&m, opts).unwrap()
}

fn pa(name: &str) -> MachineProgram {
    program(name, BuildOptions::default())
}

fn cell(s: &MachineState, sym: &str, off: u64) -> (u64, u64) {
    let a = s.symbol_addr(sym).unwrap() + off;
    (a, s.mem.read_u64(a).unwrap())
}

fn entry(s: &MachineState, f: &str) -> u64 {
    s.symbol_addr(f).unwrap()
}

#[test]
fn boot_is_deterministic_per_seed() {
    let p = pa("fig6_ptmx_store");
    let (a, b, c) = (boot(&p, 5).unwrap(), boot(&p, 5).unwrap(), boot(&p, 6).unwrap());
    assert_eq!(a.mem, b.mem);
    assert_eq!((a.key_ia, a.key_ib), (b.key_ia, b.key_ib));
    assert_ne!(a.key_ia, c.key_ia);
}

#[test]
fn static_cell_is_signed_with_its_address() {
    let p = pa("fig6_ptmx_store");
    let s = boot(&p, 1).unwrap();
    let (addr, w) = cell(&s, "@ptmx_fops", 16);
    assert_eq!(classify(w), PointerClass::Paced);
    assert_eq!(authenticate(s.key_ia, PointerWord(w), addr).0, entry(&s, "@tty_release"));
}

#[test]
fn prekey_store_is_patched_at_pa_init() {
    let p = pa("prekey");
    let s = run_program(&p, 1, MachineConfig::default(), 10_000).unwrap();
    assert!(s.halted());
    assert_eq!(s.prekey_consumed, 1);
    let (addr, w) = cell(&s, "@reboot_nb", 0);
    assert_eq!(authenticate(s.key_ia, PointerWord(w), addr).0, entry(&s, "@reboot_notify"));
    assert_eq!(s.output_cells()["out"], 23);
}

#[test]
fn signed_call_reaches_target() {
    let p = pa("fig7_load_branch");
    let s = run_program(&p, 1, MachineConfig::default(), 10_000).unwrap();
    assert_eq!(s.trap, Some(TrapKind::Halt));
    assert_eq!(s.output_cells()["out"], 42);
}

#[test]
fn corrupted_pointer_faults_on_use() {
    let p = pa("fig7_load_branch");
    for bit in [2u32, 12, 30, 45] {
        let mut s = boot(&p, 1).unwrap();
        let (addr, w) = cell(&s, "@ext4_fops", 0);
        s.mem.write_u64(addr, w ^ (1 << bit)).unwrap();
        assert!(matches!(s.run(10_000), Ok(())));
        assert!(matches!(s.trap, Some(TrapKind::AuthFailureDeref(_))), "bit {bit}: {:?}", s.trap);
    }
}

#[test]
fn trap_is_traced() {
    let p = pa("fig7_load_branch");
    let mut s = boot_with(&p, 1, MachineConfig { trace: true, ..MachineConfig::default() }).unwrap();
    let (addr, w) = cell(&s, "@ext4_fops", 0);
    s.mem.write_u64(addr, w ^ 8).unwrap();
    s.run(10_000).unwrap();
    let last = s.trace.last().unwrap();
    assert_eq!(last.event, "trap");
    assert!(last.detail.contains("AuthFailureDeref"));
}

#[test]
fn zero_fuel_exhausts_immediately() {
    let p = pa("fpcmp");
    let mut s = boot(&p, 1).unwrap();
    let before = s.retired;
    assert!(matches!(s.run(0), Err(MachineError::FuelExhausted { .. })));
    assert_eq!(s.retired, before);
}

#[test]
fn quiet_interrupts_change_nothing() {
    for opts in [BuildOptions::default(), BuildOptions::legacy(), BuildOptions::no_pa()] {
        let p = program("fig8_toctou", opts);
        let reference = run_program(&p, 1, MachineConfig::default(), 10_000).unwrap();
        let steps = reference.retired;
        for at in 0..steps {
            let mut s = boot(&p, 1).unwrap();
            while s.retired < at && s.trap.is_none() {
                s.step();
            }
            s.inject_interrupt(|_| {});
            s.run(10_000).unwrap();
            assert_eq!(s.trap, Some(TrapKind::Halt), "interrupt at {at}");
            assert_eq!(s.output_cells(), reference.output_cells());
            assert_eq!(s.retired, reference.retired);
            assert_eq!(s.regs, reference.regs);
        }
    }
}

#[test]
fn tampered_frame_is_detected() {
    let p = pa("fig8_toctou");
    let mut s = boot(&p, 1).unwrap();
    s.step();
    s.inject_interrupt(|m| {
        let a = pacter_core::isa::memmap::IRQ_FRAME + 8 * 4;
        let v = m.read_u64(a).unwrap();
        m.write_u64(a, v + 1).unwrap();
    });
    assert_eq!(s.trap, Some(TrapKind::AuthFailureDeref(pacter_core::isa::memmap::IRQ_FRAME)));
}

#[test]
fn memcpy_rebinds_and_memmove_matches_plain_copy() {
    let p = pa("memcpy");
    let booted = boot(&p, 3).unwrap();
    let key = booted.key_ia;
    let (tmpl_addr, tmpl_w) = cell(&booted, "@tmpl", 8);
    // Oracle: plain byte copy of the booted source, then strip each fp.
    let arr = booted.symbol_addr("@arr").unwrap();
    let src: Vec<u64> = (0..4).map(|i| booted.mem.read_u64(arr + 8 * i).unwrap()).collect();
    let mut s = booted.clone();
    s.run(100_000).unwrap();
    assert!(s.halted());

    let (copy_addr, copy_w) = cell(&s, "@copy", 8);
    assert_eq!(classify(copy_w), PointerClass::Paced);
    assert_eq!(authenticate(key, PointerWord(copy_w), copy_addr).0, entry(&s, "@handler_a"));
    assert_eq!(s.mem.read_u64(tmpl_addr).unwrap(), tmpl_w);
    assert_eq!(s.mem.read_u64(copy_addr - 8).unwrap(), 5);

    for (i, &w) in src.iter().enumerate() {
        let dst = arr + 16 + 8 * i as u64;
        let got = s.mem.read_u64(dst).unwrap();
        if classify(w) == PointerClass::Paced {
            assert_eq!(authenticate(key, PointerWord(got), dst), strip(PointerWord(w)), "word {i}");
        } else {
            assert_eq!(got, w, "word {i}");
        }
    }
    assert_eq!(s.output_cells()["out_mid"], 1001);
    assert_eq!(s.output_cells()["out_last"], 2002);
}

#[test]
fn integer_copy_is_bitwise() {
    let src = "
type %ops = struct { id: i64 @8, handler: fn(i64)->i64 @8 }

global @table : %ops = { 1, @h }
global @a : [3 x i64] = [-1, -35184372088832, 77]
global @b : [3 x i64] = zeroinit

func @h(%x: i64) -> i64 {
entry:
  ret %x
}

func @main() {
entry:
  memcpy @b, @a, 24
  ret
}
";
    let m = parse_module(src).unwrap();
    let p = instrument::build(&m, BuildOptions::default()).unwrap();
    let s = run_program(&p, 1, MachineConfig::default(), 10_000).unwrap();
    let (a, b) = (s.symbol_addr("@a").unwrap(), s.symbol_addr("@b").unwrap());
    assert_eq!(s.mem.read(a, 24).unwrap(), s.mem.read(b, 24).unwrap());
}

#[test]
fn freed_init_code_cannot_run() {
    let src = "
global @out : i64 = 0

func @setup() init_text {
entry:
  store 1, @out
  ret
}

func @start_kernel() init_text {
entry:
  call @setup()
  ret
}

func @main() {
entry:
  call @setup()
  ret
}
";
    let m = parse_module(src).unwrap();
    let p = instrument::build(&m, BuildOptions::default()).unwrap();
    let s = run_program(&p, 1, MachineConfig::default(), 10_000).unwrap();
    assert_eq!(s.trap, Some(TrapKind::ExecuteFreedInit));
}

#[test]
fn pa_off_runs_unsigned() {
    let p = pa("fig6_ptmx_store");
    let s = run_program(&p, 1, MachineConfig { pa_off: true, ..MachineConfig::default() }, 10_000).unwrap();
    assert!(s.halted());
    let (_, w) = cell(&s, "@ptmx_fops", 16);
    assert_eq!(classify(w), PointerClass::RawKernel);
}
