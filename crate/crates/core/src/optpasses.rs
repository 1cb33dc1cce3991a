//! Check-reduction passes over instrumented programs: redundant check
//! removal and same-lock fast verification.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::miniir::analysis::{def_sites, functions_may_free, gep_root, inst_may_free, may_free_between, natural_loops, Site};
use crate::miniir::dom::{Cfg, DomTree};
use crate::miniir::{BlockId, Function, Inst, Op, Operand, Program, Reg, Ty};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OptLevel {
    None,
    Redundant,
    SameLock,
    #[default]
    All,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::None, OptLevel::Redundant, OptLevel::SameLock, OptLevel::All];

    pub fn name(self) -> &'static str {
        match self {
            OptLevel::None => "none",
            OptLevel::Redundant => "redundant",
            OptLevel::SameLock => "samelock",
            OptLevel::All => "all",
        }
    }

    fn redundant(self) -> bool {
        matches!(self, OptLevel::Redundant | OptLevel::All)
    }

    fn same_lock(self) -> bool {
        matches!(self, OptLevel::SameLock | OptLevel::All)
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown optimization level '{s}' (none, redundant, samelock, all)"))
    }
}

/// Runs the selected passes, redundant removal first.
pub fn optimize(program: &Program, level: OptLevel) -> Program {
    let mut p = program.clone();
    if level.redundant() {
        p = remove_redundant_checks(&p);
    }
    if level.same_lock() {
        p = same_lock_optimize(&p);
    }
    p
}

struct CheckSite {
    site: Site,
    ptr: Reg,
    width: u64,
    dest: Reg,
    token: Option<Reg>,
}

fn full_checks(f: &Function, order: &[BlockId]) -> Vec<CheckSite> {
    let mut out = Vec::new();
    for &b in order {
        for (i, inst) in f.block(b).insts.iter().enumerate() {
            if let (Op::Check { width, ptr: Operand::Reg(ptr), token }, Some(dest)) = (&inst.op, inst.dest) {
                out.push(CheckSite {
                    site: (b, i),
                    ptr: *ptr,
                    width: *width,
                    dest,
                    token: *token,
                });
            }
        }
    }
    out
}

/// Deletes checks dominated by a check of the same register and width with
/// no possible free in between. Repeats until nothing changes.
pub fn remove_redundant_checks(program: &Program) -> Program {
    let frees = functions_may_free(program);
    let mut out = program.clone();
    for f in &mut out.funcs {
        let cfg = Cfg::new(f);
        let dom = DomTree::new(&cfg);
        let order = cfg.reverse_postorder();
        loop {
            let checks = full_checks(f, &order);
            let blocker = |i: &Inst| inst_may_free(&frees, i);
            let victim = checks.iter().find_map(|b| {
                if b.token.is_some() {
                    return None;
                }
                checks
                    .iter()
                    .find(|a| {
                        a.ptr == b.ptr
                            && a.width == b.width
                            && dom.inst_dominates(a.site, b.site)
                            && !may_free_between(f, &cfg, a.site, b.site, &blocker)
                    })
                    .map(|a| (a.dest, b.dest, b.site))
            });
            let Some((keep, drop, site)) = victim else { break };
            f.blocks[site.0.index()].insts.remove(site.1);
            f.replace_uses(drop, Operand::Reg(keep));
        }
    }
    out
}

/// Downgrades checks to fast verification against an id observed by an
/// earlier full check of a pointer derived from the same base.
///
/// Within straight dominance, the nearest dominating full check of the
/// same derivation root becomes the lock holder. In a loop, a check that
/// runs on every iteration can take its lock from its own previous
/// iteration through a header phi; the first iteration sees lock 0 and
/// performs the full check.
pub fn same_lock_optimize(program: &Program) -> Program {
    let frees = functions_may_free(program);
    let mut out = program.clone();
    for f in &mut out.funcs {
        same_lock_function(f, &frees);
    }
    out
}

fn same_lock_function(f: &mut Function, frees: &HashMap<String, bool>) {
    let cfg = Cfg::new(f);
    let dom = DomTree::new(&cfg);
    let order = cfg.reverse_postorder();
    let sites = def_sites(f);
    let blocker = |i: &Inst| inst_may_free(frees, i);

    struct Leader {
        site: Site,
        root: Reg,
        ptr: Reg,
    }
    let mut leaders: Vec<Leader> = Vec::new();
    let mut tokens: HashMap<Site, Reg> = HashMap::new();
    let mut downgrades: Vec<(Site, Site)> = Vec::new();

    for c in full_checks(f, &order) {
        let root = gep_root(f, &sites, c.ptr).0;
        let holder = leaders.iter().rev().find(|l| {
            l.root == root && dom.inst_dominates(l.site, c.site) && !may_free_between(f, &cfg, l.site, c.site, &blocker)
        });
        match holder {
            Some(l) => downgrades.push((c.site, l.site)),
            None => {
                if let Some(t) = c.token {
                    tokens.insert(c.site, t);
                }
                leaders.push(Leader {
                    site: c.site,
                    root,
                    ptr: c.ptr,
                });
            }
        }
    }

    for (member, holder) in downgrades {
        let token = match tokens.get(&holder) {
            Some(t) => *t,
            None => {
                let t = f.fresh_reg("lock");
                tokens.insert(holder, t);
                set_token(f, holder, t);
                t
            }
        };
        let base = leaders.iter().find(|l| l.site == holder).unwrap().ptr;
        let inst = &mut f.blocks[member.0.index()].insts[member.1];
        if let Op::Check { width, ptr, .. } = inst.op {
            inst.op = Op::FastCheck {
                width,
                ptr,
                lock: Operand::Reg(token),
                base: Operand::Reg(base),
                token: None,
            };
        }
    }

    // loop-carried locks for the checks still doing full verification
    let loops = natural_loops(&cfg, &dom);
    let mut phis: Vec<(BlockId, Inst)> = Vec::new();
    for c in full_checks(f, &order) {
        let Some(lp) = loops
            .iter()
            .filter(|l| l.contains(c.site.0))
            .min_by_key(|l| l.body.iter().filter(|x| **x).count())
        else {
            continue;
        };
        if !lp.latches.iter().all(|l| dom.dominates(c.site.0, *l)) {
            continue;
        }
        let root = gep_root(f, &sites, c.ptr).0;
        let root_outside = match sites[root.0 as usize] {
            None => true,
            Some((b, _)) => !lp.contains(b),
        };
        if !root_outside {
            continue;
        }
        let frees_in_loop = f
            .block_ids()
            .filter(|b| lp.contains(*b))
            .any(|b| f.block(b).insts.iter().any(blocker));
        if frees_in_loop {
            continue;
        }
        let token = match c.token {
            Some(t) => t,
            None => f.fresh_reg("lock"),
        };
        let carried = f.fresh_reg("lock.in");
        let incoming = cfg.preds[lp.header.index()]
            .iter()
            .map(|p| {
                let v = if lp.contains(*p) { Operand::Reg(token) } else { Operand::Imm(0) };
                (v, *p)
            })
            .collect();
        let inst = &mut f.blocks[c.site.0.index()].insts[c.site.1];
        inst.op = Op::FastCheck {
            width: c.width,
            ptr: Operand::Reg(c.ptr),
            lock: Operand::Reg(carried),
            base: Operand::Reg(root),
            token: Some(token),
        };
        phis.push((
            lp.header,
            Inst::new(Some(carried), Op::Phi { ty: Ty::I64, incoming }, None),
        ));
    }
    for (header, phi) in phis {
        f.blocks[header.index()].insts.insert(0, phi);
    }
}

fn set_token(f: &mut Function, site: Site, t: Reg) {
    if let Op::Check { token, .. } = &mut f.blocks[site.0.index()].insts[site.1].op {
        *token = Some(t);
    }
}

/// Static numbers of full and fast checks.
pub fn count_checks(program: &Program) -> (usize, usize) {
    let mut full = 0;
    let mut fast = 0;
    for f in &program.funcs {
        for (_, _, inst) in f.insts() {
            match inst.op {
                Op::Check { .. } => full += 1,
                Op::FastCheck { .. } => fast += 1,
                _ => {}
            }
        }
    }
    (full, fast)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::{instrument, lint};
    use crate::miniir::{load, validate};

    fn prepare(body: &str) -> Program {
        let src = format!(
            "extern @ext_nop() -> i32\nfunc @release(%p: ptr) -> void {{\nentry:\n  free %p\n  ret\n}}\nfunc @main() -> i32 {{\nentry:\n{body}\n  ret 0\n}}\n"
        );
        instrument(&load(&src).unwrap()).unwrap()
    }

    fn checked(p: &Program) -> Program {
        validate(p).unwrap();
        lint(p).unwrap();
        p.clone()
    }

    #[test]
    fn consecutive_loads_share_a_check() {
        let p = prepare("  %p = malloc 8\n  %a = load.i32 %p\n  %b = load.i32 %p\n  %c = load.i32 %p");
        assert_eq!(count_checks(&p), (3, 0));
        let q = checked(&remove_redundant_checks(&p));
        assert_eq!(count_checks(&q), (1, 0));
    }

    #[test]
    fn free_blocks_removal() {
        let p = prepare("  %p = malloc 8\n  %q = malloc 8\n  %a = load.i32 %p\n  free %q\n  %b = load.i32 %p");
        assert_eq!(count_checks(&remove_redundant_checks(&p)), (2, 0));
        let p = prepare("  %p = malloc 8\n  %a = load.i32 %p\n  call @release(%p)\n  %b = load.i32 %p");
        assert_eq!(count_checks(&remove_redundant_checks(&p)), (2, 0));
        // an external call without pointer arguments still blocks
        let p = prepare("  %p = malloc 8\n  %a = load.i32 %p\n  %z = call @ext_nop()\n  %b = load.i32 %p");
        assert_eq!(count_checks(&remove_redundant_checks(&p)), (2, 0));
        assert_eq!(count_checks(&optimize(&p, OptLevel::All)), (2, 0));
    }

    #[test]
    fn width_differences_keep_checks() {
        let p = prepare("  %p = malloc 8\n  %a = load.i32 %p\n  %b = load.i64 %p");
        assert_eq!(count_checks(&remove_redundant_checks(&p)), (2, 0));
    }

    #[test]
    fn diamond_arms_do_not_dominate() {
        let p = prepare("  %p = malloc 8\n  %c = const.i32 1\n  cbr %c, l, r\nl:\n  %a = load.i32 %p\n  br j\nr:\n  %b = load.i32 %p\n  br j\nj:");
        assert_eq!(count_checks(&remove_redundant_checks(&p)), (2, 0));
        assert_eq!(count_checks(&optimize(&p, OptLevel::All)), (2, 0));
    }

    #[test]
    fn unrolled_offsets_share_a_lock() {
        let p = prepare(
            "  %p = malloc 16\n  %p4 = gep %p, 4\n  %p8 = gep %p, 8\n  %p12 = gep %p8, 4\n  store.i32 %p, 0\n  store.i32 %p4, 1\n  store.i32 %p8, 2\n  store.i32 %p12, 3",
        );
        let q = checked(&same_lock_optimize(&p));
        assert_eq!(count_checks(&q), (1, 3));
        let main = q.func("main").unwrap();
        let leader = main.insts().find(|(_, _, i)| matches!(i.op, Op::Check { .. })).unwrap().2;
        assert!(matches!(leader.op, Op::Check { token: Some(_), .. }));
    }

    #[test]
    fn external_call_breaks_the_chain() {
        let p = prepare("  %p = malloc 16\n  %p4 = gep %p, 4\n  store.i32 %p, 0\n  %z = call @ext_nop()\n  store.i32 %p4, 1");
        assert_eq!(count_checks(&same_lock_optimize(&p)), (2, 0));
    }

    const LOOP: &str = "  %arr = malloc 4000
  br head
head:
  %i = phi.i64 [0, entry], [%i.next, body]
  %c = icmp.slt.i64 %i, 1000
  cbr %c, body, exit
body:
  %off = mul.i64 %i, 4
  %q = gep %arr, %off
  store.i32 %q, 7
  %i.next = add.i64 %i, 1
  br head
exit:
  free %arr";

    #[test]
    fn loop_check_takes_its_lock_from_the_previous_iteration() {
        let p = prepare(LOOP);
        assert_eq!(count_checks(&p), (1, 0));
        let q = checked(&optimize(&p, OptLevel::All));
        assert_eq!(count_checks(&q), (0, 1));
        let main = q.func("main").unwrap();
        let head = &main.blocks[main.block_by_label("head").unwrap().index()];
        assert!(matches!(&head.insts[0].op, Op::Phi { ty: Ty::I64, incoming } if incoming.len() == 2));
    }

    #[test]
    fn loop_with_free_is_left_alone() {
        let body = LOOP.replace("  %i.next = add.i64 %i, 1", "  %t = malloc 4\n  free %t\n  %i.next = add.i64 %i, 1");
        let p = prepare(&body);
        assert_eq!(count_checks(&optimize(&p, OptLevel::All)), (1, 0));
    }

    #[test]
    fn header_check_dominates_body() {
        let p = prepare(
            "  %p = malloc 16\n  br head\nhead:\n  %i = phi.i64 [0, entry], [%n, body]\n  %x = load.i32 %p\n  %c = icmp.slt.i64 %i, 3\n  cbr %c, body, exit\nbody:\n  %q = gep %p, 4\n  store.i32 %q, 1\n  %n = add.i64 %i, 1\n  br head\nexit:",
        );
        let q = checked(&optimize(&p, OptLevel::SameLock));
        let (full, fast) = count_checks(&q);
        assert_eq!(full + fast, 2);
        assert!(fast >= 1);
    }

    #[test]
    fn passes_never_add_checks() {
        for body in [LOOP, "  %p = malloc 8\n  %a = load.i32 %p\n  %b = load.i32 %p"] {
            let p = prepare(body);
            let before = count_checks(&p).0;
            for level in OptLevel::ALL {
                let (full, fast) = count_checks(&optimize(&p, level));
                assert!(full + fast <= before);
            }
        }
    }

    #[test]
    fn uninstrumented_counts_zero() {
        let p = load("func @main() -> i32 {\nentry:\n  %p = malloc 4\n  %x = load.i32 %p\n  ret %x\n}\n").unwrap();
        assert_eq!(count_checks(&p), (0, 0));
    }

    #[test]
    fn level_names() {
        for l in OptLevel::ALL {
            assert_eq!(l.name().parse::<OptLevel>().unwrap(), l);
        }
        assert!("fast".parse::<OptLevel>().is_err());
    }
}
