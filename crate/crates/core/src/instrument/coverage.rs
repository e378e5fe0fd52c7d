use serde::{Deserialize, Serialize};

use super::object::MachineProgram;
use crate::isa::{MInst, Reg};

/// Branch-instruction census of a text image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub blr: usize,
    pub blraa: usize,
    pub ret: usize,
    pub retaa: usize,
    pub paciasp: usize,
    pub autiasp: usize,
    /// `autiasp` immediately followed by `ret`.
    pub split_pairs: usize,
    /// Raw indirect calls and unprotected returns of functions that spill lr.
    pub offenders: Vec<String>,
}

impl CoverageReport {
    pub fn add(&mut self, other: &CoverageReport) {
        self.blr += other.blr;
        self.blraa += other.blraa;
        self.ret += other.ret;
        self.retaa += other.retaa;
        self.paciasp += other.paciasp;
        self.autiasp += other.autiasp;
        self.split_pairs += other.split_pairs;
        self.offenders.extend(other.offenders.iter().cloned());
    }
}

fn spills_lr(inst: &MInst) -> bool {
    match inst {
        MInst::Str { rt, .. } => *rt == Reg::Lr,
        MInst::Stp { rt1, rt2, .. } => *rt1 == Reg::Lr || *rt2 == Reg::Lr,
        _ => false,
    }
}

pub fn coverage_scan(p: &MachineProgram) -> CoverageReport {
    let mut r = CoverageReport::default();
    for f in p.functions() {
        let body = &p.text[f.start..f.end];
        let lr_spill = body.iter().any(spills_lr);
        for (k, inst) in body.iter().enumerate() {
            let site = format!("@{}+{}", f.name, k);
            match inst {
                MInst::Blr { .. } => {
                    r.blr += 1;
                    r.offenders.push(format!("{site}: {inst}"));
                }
                MInst::Blraa { .. } => r.blraa += 1,
                MInst::Retaa => r.retaa += 1,
                MInst::Paciasp => r.paciasp += 1,
                MInst::Autiasp => {
                    r.autiasp += 1;
                    if matches!(body.get(k + 1), Some(MInst::Ret)) {
                        r.split_pairs += 1;
                    }
                }
                MInst::Ret => {
                    r.ret += 1;
                    if lr_spill {
                        r.offenders.push(format!("{site}: unprotected ret"));
                    }
                }
                _ => {}
            }
        }
    }
    r
}
