use pacter_core::codec::{
    authenticate, classify, compute_pac, decode_piggyback, encode_piggyback, match_paced_fp, sign, FnIndexTable,
    Key128, Pac7, PointerClass, PointerWord, KERNEL_BASE, OFFSET_MASK,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kernel_ptr(bits: u64) -> PointerWord {
    PointerWord(KERNEL_BASE | (bits & OFFSET_MASK & !3))
}

fn table(n: u64) -> FnIndexTable {
    let mut t = FnIndexTable::new();
    for i in 0..n {
        t.register(format!("f{i}"), KERNEL_BASE + 0x10_0000 + 16 * i).unwrap();
    }
    t
}

proptest! {
    #[test]
    fn sign_auth_round_trip(hi: u64, lo: u64, p: u64, ctx: u64) {
        let key = Key128::new(hi, lo);
        let raw = kernel_ptr(p);
        let s = sign(key, raw, ctx).unwrap();
        prop_assert_eq!(authenticate(key, s, ctx), raw);
        prop_assert_eq!(s.embedded_pac(), compute_pac(key, raw.0, ctx));
    }

    #[test]
    fn piggyback_round_trip(i in 0u64..500, pac in 0u8..128, a: u64) {
        let t = table(500);
        let f = PointerWord(t.entry(i as u16 + 1).unwrap());
        let addr = kernel_ptr(a).0;
        let pb = encode_piggyback(&t, f, Pac7::new(pac).unwrap(), addr).unwrap();
        prop_assert_eq!(classify(pb.0), PointerClass::Piggyback);
        let (paced, storage) = decode_piggyback(&t, pb).unwrap();
        prop_assert_eq!(storage, addr);
        prop_assert_eq!(paced.embedded_pac().value(), pac);
        prop_assert_eq!(paced.canonical(), f);
    }

    #[test]
    fn decoded_pointer_authenticates_at_decoded_address(hi: u64, lo: u64, i in 1u16..=64, a: u64) {
        let t = table(64);
        let key = Key128::new(hi, lo);
        let f = PointerWord(t.entry(i).unwrap());
        let addr = kernel_ptr(a).0;
        let pac = sign(key, f, addr).unwrap().embedded_pac();
        let (paced, at) = decode_piggyback(&t, encode_piggyback(&t, f, pac, addr).unwrap()).unwrap();
        prop_assert_eq!(authenticate(key, paced, at), f);
    }
}

#[test]
fn context_changes_pac() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 10_000;
    let mut differ = 0;
    for _ in 0..trials {
        let key = Key128::new(rng.gen(), rng.gen());
        let p = kernel_ptr(rng.gen()).0;
        let (c1, c2): (u64, u64) = (rng.gen(), rng.gen());
        differ += usize::from(compute_pac(key, p, c1) != compute_pac(key, p, c2));
    }
    // 120 of 128 scaled to the sample.
    assert!(differ * 128 >= trials * 120, "{differ}/{trials}");
}

#[test]
fn single_bit_flip_poisons() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let trials = 10_000;
    let mut poisoned = 0;
    for _ in 0..trials {
        let key = Key128::new(rng.gen(), rng.gen());
        let ctx: u64 = rng.gen();
        let s = sign(key, kernel_ptr(rng.gen()), ctx).unwrap();
        let bit = rng.gen_range(2..45);
        let v = authenticate(key, PointerWord(s.0 ^ (1 << bit)), ctx);
        poisoned += usize::from(classify(v.0) == PointerClass::Poisoned);
    }
    assert!(poisoned as f64 / trials as f64 >= 0.98, "{poisoned}/{trials}");
}

#[test]
fn wrong_key_poisons() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let trials = 10_000;
    let mut poisoned = 0;
    for _ in 0..trials {
        let (k1, k2) = (Key128::new(rng.gen(), rng.gen()), Key128::new(rng.gen(), rng.gen()));
        let ctx: u64 = rng.gen();
        let s = sign(k1, kernel_ptr(rng.gen()), ctx).unwrap();
        poisoned += usize::from(classify(authenticate(k2, s, ctx).0) == PointerClass::Poisoned);
    }
    assert!(poisoned as f64 / trials as f64 >= 0.98, "{poisoned}/{trials}");
}

#[test]
fn wrong_address_poisons() {
    let key = Key128::new(3, 4);
    let raw = kernel_ptr(0x1234_5670);
    let s = sign(key, raw, KERNEL_BASE + 0x80_0008).unwrap();
    let mut hits = 0;
    for b in 0..1000u64 {
        let other = KERNEL_BASE + 0x80_1000 + 8 * b;
        hits += usize::from(authenticate(key, s, other) == raw);
    }
    // Seven PAC bits: about 8 expected collisions in 1000.
    assert!(hits < 25, "{hits}");
}

#[test]
fn matcher_false_positive_rate() {
    let t = table(100);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 100_000u64;
    let hits = (0..n).filter(|_| match_paced_fp(&t, rng.gen())).count() as f64;
    let bound = t.len() as f64 / (1u64 << 19) as f64;
    assert!(hits / n as f64 <= bound, "{hits}");
}

#[test]
fn matcher_accepts_signed_fn_rejects_signed_data() {
    let t = table(4);
    let key = Key128::new(9, 9);
    let f = sign(key, PointerWord(t.entry(2).unwrap()), 77).unwrap();
    assert!(match_paced_fp(&t, f.0));
    let d = sign(key, PointerWord(KERNEL_BASE + 0x80_0010), 77).unwrap();
    assert!(!match_paced_fp(&t, d.0));
}

#[test]
fn index_zero_is_reserved() {
    let t = table(4);
    let pb = PointerWord((0x2au64 << 43) | 0x100);
    assert!(decode_piggyback(&t, pb).is_err());
}
