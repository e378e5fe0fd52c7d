//! Linear-scan allocation of virtual registers onto the callee-saved pool.

use std::collections::{BTreeSet, HashMap};

use crate::isa::{MInst, Reg, POOL_FIRST, POOL_LAST};

/// One line of function code before layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Label(String),
    Inst(MInst),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Interval {
    vreg: u32,
    start: usize,
    end: usize,
}

fn vregs(regs: Vec<Reg>) -> impl Iterator<Item = u32> {
    regs.into_iter().filter_map(|r| match r {
        Reg::V(n) => Some(n),
        _ => None,
    })
}

/// Live ranges over the instruction order, extended across loops by a
/// backward liveness fixpoint.
fn intervals(code: &[MInst], labels: &HashMap<String, usize>) -> Vec<Interval> {
    let n = code.len();
    let succs: Vec<Vec<usize>> = code
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut s = Vec::new();
            if let Some(t) = inst.branch_target().and_then(|t| labels.get(t)).filter(|&&t| t < n) {
                s.push(*t);
            }
            if !inst.ends_flow() && i + 1 < n {
                s.push(i + 1);
            }
            s
        })
        .collect();
    let uses: Vec<BTreeSet<u32>> = code.iter().map(|i| vregs(i.uses()).collect()).collect();
    let defs: Vec<BTreeSet<u32>> = code.iter().map(|i| vregs(i.defs()).collect()).collect();
    let mut live_in: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut changed = true;
    while changed {
        changed = false;
        for i in (0..n).rev() {
            let mut out: BTreeSet<u32> = BTreeSet::new();
            for &s in &succs[i] {
                out.extend(&live_in[s]);
            }
            let mut inn: BTreeSet<u32> = out.difference(&defs[i]).copied().collect();
            inn.extend(&uses[i]);
            if inn != live_in[i] {
                live_in[i] = inn;
                changed = true;
            }
        }
    }
    let mut span: HashMap<u32, (usize, usize)> = HashMap::new();
    for i in 0..n {
        for &v in live_in[i].iter().chain(&defs[i]) {
            let e = span.entry(v).or_insert((i, i));
            e.0 = e.0.min(i);
            e.1 = e.1.max(i);
        }
    }
    let mut out: Vec<Interval> = span.into_iter().map(|(vreg, (start, end))| Interval { vreg, start, end }).collect();
    out.sort_by_key(|iv| (iv.start, iv.vreg));
    out
}

/// Replaces every virtual register with a pool register. Returns the
/// rewritten code and the pool registers used, or the number of values live
/// at the point where the pool ran out.
pub fn allocate(items: &[Item]) -> Result<(Vec<Item>, Vec<Reg>), usize> {
    let mut code = Vec::new();
    let mut labels = HashMap::new();
    for item in items {
        match item {
            Item::Label(l) => {
                labels.insert(l.clone(), code.len());
            }
            Item::Inst(i) => code.push(i.clone()),
        }
    }
    let mut assignment: HashMap<u32, Reg> = HashMap::new();
    let mut active: Vec<(Interval, u8)> = Vec::new();
    let mut used = BTreeSet::new();
    for iv in intervals(&code, &labels) {
        active.retain(|(a, _)| a.end >= iv.start);
        let taken: BTreeSet<u8> = active.iter().map(|(_, r)| *r).collect();
        let Some(r) = (POOL_FIRST..=POOL_LAST).find(|r| !taken.contains(r)) else {
            return Err(active.len() + 1);
        };
        used.insert(r);
        assignment.insert(iv.vreg, Reg::R(r));
        active.push((iv, r));
    }
    let out = items
        .iter()
        .map(|item| match item {
            Item::Label(l) => Item::Label(l.clone()),
            Item::Inst(i) => {
                let mut i = i.clone();
                // Values that are never live (dead definitions) share r28.
                i.map_regs(|r| match r {
                    Reg::V(v) => assignment.get(&v).copied().unwrap_or(crate::isa::SCRATCH),
                    other => other,
                });
                Item::Inst(i)
            }
        })
        .collect();
    Ok((out, used.into_iter().map(Reg::R).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{AluOp, Src};

    fn inst(s: &str) -> Item {
        Item::Inst(s.parse().unwrap())
    }

    #[test]
    fn disjoint_ranges_share_a_register() {
        let code =
            vec![inst("movimm v0, #1"), inst("mov r0, v0"), inst("movimm v1, #2"), inst("mov r0, v1"), inst("ret")];
        let (out, used) = allocate(&code).unwrap();
        assert_eq!(used, vec![Reg::R(4)]);
        assert!(out.iter().all(|i| match i {
            Item::Inst(i) => !i.uses().iter().chain(&i.defs()).any(|r| r.is_virtual()),
            _ => true,
        }));
    }

    #[test]
    fn loop_carried_value_stays_live() {
        let code = vec![
            inst("movimm v0, #0"),
            Item::Label("f.loop".into()),
            inst("movimm v1, #5"),
            Item::Inst(MInst::alu(AluOp::Add, Reg::V(0), Reg::V(0), Src::Imm(1))),
            inst("cmp v0, v1"),
            inst("b.ne f.loop"),
            inst("ret"),
        ];
        let (_, used) = allocate(&code).unwrap();
        assert_eq!(used.len(), 2);
    }

    #[test]
    fn pressure_is_reported() {
        let mut code: Vec<Item> = (0..25).map(|v| inst(&format!("movimm v{v}, #{v}"))).collect();
        code.extend((0..25).map(|v| inst(&format!("mov r0, v{v}"))));
        assert_eq!(allocate(&code), Err(25));
    }
}
