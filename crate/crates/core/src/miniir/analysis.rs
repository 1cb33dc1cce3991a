//! Def lookup, pointer derivation chains, loops and may-free queries.

use std::collections::HashMap;

use super::ast::*;
use super::dom::{Cfg, DomTree};

pub type Site = (BlockId, usize);

/// Definition site of every register (parameters have none).
pub fn def_sites(f: &Function) -> Vec<Option<Site>> {
    let mut sites = vec![None; f.num_regs()];
    for (b, i, inst) in f.insts() {
        for d in inst.defs() {
            sites[d.0 as usize] = Some((b, i));
        }
    }
    sites
}

pub fn inst_at(f: &Function, site: Site) -> &Inst {
    &f.blocks[site.0.index()].insts[site.1]
}

/// Follows `gep` definitions back to the pointer they derive from.
/// Returns the root and the accumulated offset when every step is constant.
pub fn gep_root(f: &Function, sites: &[Option<Site>], mut r: Reg) -> (Reg, Option<i64>) {
    let mut total = Some(0i64);
    let mut steps = 0;
    while let Some(site) = sites[r.0 as usize] {
        let Op::Gep { base: Operand::Reg(base), offset } = &inst_at(f, site).op else {
            break;
        };
        total = match (total, offset) {
            (Some(t), Operand::Imm(k)) => Some(t.wrapping_add(*k)),
            _ => None,
        };
        r = *base;
        steps += 1;
        if steps > f.num_regs() {
            break;
        }
    }
    (r, total)
}

/// Whether calling `f` may release memory, per function.
pub fn functions_may_free(program: &Program) -> HashMap<String, bool> {
    let mut frees: HashMap<String, bool> = program.funcs.iter().map(|f| (f.name.clone(), false)).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for f in &program.funcs {
            if frees[&f.name] {
                continue;
            }
            if f.insts().any(|(_, _, inst)| inst_may_free(&frees, inst)) {
                frees.insert(f.name.clone(), true);
                changed = true;
            }
        }
    }
    frees
}

/// Frees, external calls (treated as opaque) and calls to functions that may
/// free transitively.
pub fn inst_may_free(frees: &HashMap<String, bool>, inst: &Inst) -> bool {
    match &inst.op {
        Op::Free { .. } | Op::PFree { .. } | Op::WCall { .. } => true,
        Op::Call { callee, .. } => match frees.get(callee) {
            Some(f) => *f,
            None => true,
        },
        _ => false,
    }
}

/// Whether an instruction satisfying `frees` lies on some path from `a` to
/// `b` that does not pass through `a` again. Both endpoints are excluded.
pub fn may_free_between(f: &Function, cfg: &Cfg, a: Site, b: Site, frees: &dyn Fn(&Inst) -> bool) -> bool {
    let block_insts = |blk: BlockId| &f.blocks[blk.index()].insts;
    if a.0 == b.0 && a.1 < b.1 {
        return block_insts(a.0)[a.1 + 1..b.1].iter().any(frees);
    }
    let n = cfg.len();
    // blocks strictly between the two endpoints' blocks
    let mut fwd = vec![false; n];
    let mut stack: Vec<BlockId> = cfg.succs[a.0.index()].clone();
    let mut reaches_b = false;
    while let Some(x) = stack.pop() {
        if x == b.0 {
            reaches_b = true;
            continue;
        }
        if x == a.0 || fwd[x.index()] {
            continue;
        }
        fwd[x.index()] = true;
        stack.extend(cfg.succs[x.index()].iter().copied());
    }
    if !reaches_b {
        return false;
    }
    let mut bwd = vec![false; n];
    let mut stack: Vec<BlockId> = cfg.preds[b.0.index()].clone();
    while let Some(x) = stack.pop() {
        if x == a.0 || x == b.0 || bwd[x.index()] {
            continue;
        }
        bwd[x.index()] = true;
        stack.extend(cfg.preds[x.index()].iter().copied());
    }
    if block_insts(a.0)[a.1 + 1..].iter().any(frees) || block_insts(b.0)[..b.1].iter().any(frees) {
        return true;
    }
    (0..n).any(|x| fwd[x] && bwd[x] && f.blocks[x].insts.iter().any(frees))
}

#[derive(Debug, Clone)]
pub struct Loop {
    pub header: BlockId,
    pub latches: Vec<BlockId>,
    pub body: Vec<bool>,
}

impl Loop {
    pub fn contains(&self, b: BlockId) -> bool {
        self.body[b.index()]
    }
}

/// Natural loops, one per header.
pub fn natural_loops(cfg: &Cfg, dom: &DomTree) -> Vec<Loop> {
    let n = cfg.len();
    let mut loops: Vec<Loop> = Vec::new();
    for latch in 0..n {
        for &header in &cfg.succs[latch] {
            let latch = BlockId(latch as u32);
            if !dom.dominates(header, latch) {
                continue;
            }
            let idx = match loops.iter().position(|l| l.header == header) {
                Some(i) => i,
                None => {
                    let mut body = vec![false; n];
                    body[header.index()] = true;
                    loops.push(Loop {
                        header,
                        latches: Vec::new(),
                        body,
                    });
                    loops.len() - 1
                }
            };
            let lp = &mut loops[idx];
            lp.latches.push(latch);
            let mut stack = vec![latch];
            while let Some(x) = stack.pop() {
                if lp.body[x.index()] {
                    continue;
                }
                lp.body[x.index()] = true;
                stack.extend(cfg.preds[x.index()].iter().copied());
            }
        }
    }
    loops
}
