//! The instrumentation pass: classifies stack and global objects, rewrites
//! allocation and deallocation, inserts pointer checks, builds the global
//! pointer table and mediates calls into uninstrumented code.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::miniir::analysis::{def_sites, gep_root, inst_at, Site};
use crate::miniir::{self, is_wrapped, Function, Inst, IrError, MemTy, Op, Operand, Program, Reg, Ty};

pub use crate::runtime::padded_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnsafeReason {
    NonStaticBounds,
    AddressTaken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SafetyClass {
    Safe,
    Unsafe(UnsafeReason),
}

impl SafetyClass {
    pub fn is_safe(self) -> bool {
        self == SafetyClass::Safe
    }

    fn join(self, other: SafetyClass) -> SafetyClass {
        match (self, other) {
            (SafetyClass::Safe, x) | (x, SafetyClass::Safe) => x,
            (SafetyClass::Unsafe(a), SafetyClass::Unsafe(b)) => SafetyClass::Unsafe(a.max(b)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Classification {
    /// Per function name, the class of each alloca result register.
    pub allocas: HashMap<String, HashMap<Reg, SafetyClass>>,
    pub globals: HashMap<String, SafetyClass>,
}

impl Classification {
    pub fn alloca(&self, func: &str, reg: Reg) -> Option<SafetyClass> {
        self.allocas.get(func)?.get(&reg).copied()
    }

    pub fn global(&self, name: &str) -> SafetyClass {
        self.globals.get(name).copied().unwrap_or(SafetyClass::Safe)
    }

    pub fn unsafe_globals<'a>(&'a self, program: &'a Program) -> impl Iterator<Item = &'a miniir::Global> + 'a {
        program.globals.iter().filter(|g| !self.global(&g.name).is_safe())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error("program is already instrumented")]
    AlreadyInstrumented,
    #[error(transparent)]
    Invalid(#[from] IrError),
    #[error("incomplete instrumentation in @{function}: {msg}")]
    Lint { function: String, msg: String },
}

fn use_sites(f: &Function) -> Vec<Vec<Site>> {
    let mut uses = vec![Vec::new(); f.num_regs()];
    for (b, i, inst) in f.insts() {
        for r in inst.op.operands().into_iter().filter_map(Operand::reg) {
            if !uses[r.0 as usize].contains(&(b, i)) {
                uses[r.0 as usize].push((b, i));
            }
        }
    }
    uses
}

/// Safe iff every use of `root`, followed through constant-offset geps, is a
/// load or store in bounds of `size` bytes.
fn classify_root(f: &Function, uses: &[Vec<Site>], root: Reg, size: u64) -> SafetyClass {
    let mut class = SafetyClass::Safe;
    let mut stack = vec![(root, 0i64)];
    let mut seen = HashSet::new();
    let in_bounds = |off: i64, ty: MemTy| off >= 0 && (off as u64).checked_add(ty.width()).is_some_and(|end| end <= size);
    while let Some((r, off)) = stack.pop() {
        if !seen.insert((r, off)) {
            continue;
        }
        for &site in &uses[r.0 as usize] {
            let inst = inst_at(f, site);
            let me = Operand::Reg(r);
            match &inst.op {
                Op::Load { ty, ptr } if *ptr == me => {
                    if !in_bounds(off, *ty) {
                        class = class.join(SafetyClass::Unsafe(UnsafeReason::NonStaticBounds));
                    }
                }
                Op::Store { ty, ptr, value } if *ptr == me && *value != me => {
                    if !in_bounds(off, *ty) {
                        class = class.join(SafetyClass::Unsafe(UnsafeReason::NonStaticBounds));
                    }
                }
                Op::Gep { base, offset } if *base == me => match (offset, inst.dest) {
                    (Operand::Imm(k), Some(d)) => stack.push((d, off.wrapping_add(*k))),
                    _ => class = class.join(SafetyClass::Unsafe(UnsafeReason::NonStaticBounds)),
                },
                _ => return SafetyClass::Unsafe(UnsafeReason::AddressTaken),
            }
        }
    }
    class
}

pub fn classify(program: &Program) -> Classification {
    let mut out = Classification::default();
    for g in &program.globals {
        out.globals.insert(g.name.clone(), SafetyClass::Safe);
    }
    for f in &program.funcs {
        let uses = use_sites(f);
        let mut allocas = HashMap::new();
        for (_, _, inst) in f.insts() {
            match (&inst.op, inst.dest) {
                (Op::Alloca { size }, Some(d)) => {
                    allocas.insert(d, classify_root(f, &uses, d, *size));
                }
                (Op::GlobalAddr { global }, Some(d)) => {
                    let size = program.global(global).map_or(0, |g| g.size);
                    let class = classify_root(f, &uses, d, size);
                    let slot = out.globals.entry(global.clone()).or_insert(SafetyClass::Safe);
                    *slot = slot.join(class);
                }
                _ => {}
            }
        }
        out.allocas.insert(f.name.clone(), allocas);
    }
    out
}

/// Registers that address a Safe object directly (through constant geps).
fn safe_direct(f: &Function, class: &Classification) -> HashSet<Reg> {
    let sites = def_sites(f);
    let mut safe = HashSet::new();
    for r in 0..f.num_regs() as u32 {
        let (root, off) = gep_root(f, &sites, Reg(r));
        if off.is_none() {
            continue;
        }
        let Some(site) = sites[root.0 as usize] else { continue };
        let ok = match &inst_at(f, site).op {
            Op::Alloca { .. } => class.alloca(&f.name, root) == Some(SafetyClass::Safe),
            Op::GlobalAddr { global } => class.global(global).is_safe(),
            _ => false,
        };
        if ok {
            safe.insert(Reg(r));
        }
    }
    safe
}

struct Rewriter<'a> {
    program: &'a Program,
    class: &'a Classification,
    f: Function,
    safe: HashSet<Reg>,
    /// Raw slot register and size of each unsafe alloca.
    unprotect: Vec<(Reg, u64)>,
}

impl Rewriter<'_> {
    fn fresh_for(&mut self, base: Option<Reg>, suffix: &str) -> Reg {
        let hint = match base {
            Some(r) => format!("{}.{suffix}", self.f.reg_name(r)),
            None => suffix.to_string(),
        };
        self.f.fresh_reg(&hint)
    }

    fn checked(&mut self, out: &mut Vec<Inst>, ptr: Operand, width: u64, origin: Option<u32>) -> Operand {
        if let Operand::Reg(r) = ptr {
            if self.safe.contains(&r) {
                return ptr;
            }
        }
        let c = self.fresh_for(ptr.reg(), "chk");
        out.push(Inst::new(Some(c), Op::Check { width, ptr, token: None }, origin));
        Operand::Reg(c)
    }

    fn rewrite(&mut self, inst: Inst, out: &mut Vec<Inst>) {
        let origin = inst.origin;
        match inst.op {
            Op::Alloca { size } => {
                let d = inst.dest.expect("alloca has a result");
                if self.class.alloca(&self.f.name, d) == Some(SafetyClass::Safe) {
                    out.push(Inst::new(Some(d), Op::Alloca { size }, origin));
                    return;
                }
                let raw = self.fresh_for(Some(d), "raw");
                out.push(Inst::new(Some(raw), Op::Alloca { size }, origin));
                out.push(Inst::new(
                    Some(d),
                    Op::Sign {
                        ptr: Operand::Reg(raw),
                        size,
                    },
                    origin,
                ));
                self.unprotect.push((raw, size));
            }
            Op::GlobalAddr { global } if !self.class.global(&global).is_safe() => {
                out.push(Inst::new(inst.dest, Op::GpptLoad { global }, origin));
            }
            Op::Malloc { size } => out.push(Inst::new(inst.dest, Op::PMalloc { size }, origin)),
            Op::Free { ptr } => out.push(Inst::new(inst.dest, Op::PFree { ptr }, origin)),
            Op::Load { ty, ptr } => {
                let ptr = self.checked(out, ptr, ty.width(), origin);
                out.push(Inst::new(inst.dest, Op::Load { ty, ptr }, origin));
            }
            Op::Store { ty, ptr, value } => {
                let ptr = self.checked(out, ptr, ty.width(), origin);
                out.push(Inst::new(inst.dest, Op::Store { ty, ptr, value }, origin));
            }
            Op::Call { callee, args } if self.program.extern_decl(&callee).is_some() => {
                if is_wrapped(&callee) {
                    out.push(Inst::new(inst.dest, Op::WCall { callee, args }, origin));
                    return;
                }
                let ext = self.program.extern_decl(&callee).unwrap();
                let mut new_args = Vec::with_capacity(args.len());
                for (a, ty) in args.into_iter().zip(ext.params.clone()) {
                    if ty == Ty::Ptr {
                        let s = self.fresh_for(a.reg(), "strip");
                        out.push(Inst::new(Some(s), Op::Strip { ptr: a }, origin));
                        new_args.push(Operand::Reg(s));
                    } else {
                        new_args.push(a);
                    }
                }
                match (inst.dest, ext.ret) {
                    (Some(d), Some(Ty::Ptr)) => {
                        let raw = self.fresh_for(Some(d), "raw");
                        out.push(Inst::new(Some(raw), Op::Call { callee, args: new_args }, origin));
                        out.push(Inst::new(Some(d), Op::Resign { ptr: Operand::Reg(raw) }, origin));
                    }
                    (dest, _) => out.push(Inst::new(dest, Op::Call { callee, args: new_args }, origin)),
                }
            }
            Op::Ret { value } => {
                for (raw, size) in self.unprotect.clone() {
                    out.push(Inst::new(
                        None,
                        Op::Unprotect {
                            ptr: Operand::Reg(raw),
                            size,
                        },
                        origin,
                    ));
                }
                out.push(Inst::new(None, Op::Ret { value }, origin));
            }
            op => out.push(Inst::new(inst.dest, op, origin)),
        }
    }
}

fn instrument_function(program: &Program, class: &Classification, f: &Function) -> Function {
    let mut rw = Rewriter {
        program,
        class,
        safe: safe_direct(f, class),
        f: f.clone(),
        unprotect: Vec::new(),
    };
    // allocas sit in the entry block, which is rewritten first, so every
    // return sees the full list of slots to unprotect
    let mut blocks = Vec::with_capacity(f.blocks.len());
    for block in &f.blocks {
        let mut out = Vec::with_capacity(block.insts.len() * 2);
        for inst in &block.insts {
            rw.rewrite(inst.clone(), &mut out);
        }
        blocks.push(out);
    }
    let mut nf = rw.f;
    for (block, insts) in nf.blocks.iter_mut().zip(blocks) {
        block.insts = insts;
    }
    if nf.name == "main" {
        let init: Vec<Inst> = class
            .unsafe_globals(program)
            .map(|g| Inst::new(None, Op::GpptInit { global: g.name.clone() }, None))
            .collect();
        nf.blocks[0].insts.splice(0..0, init);
    }
    nf
}

/// Instruments a validated source program.
pub fn instrument(program: &Program) -> Result<Program, InstrumentError> {
    if program.instrumented {
        return Err(InstrumentError::AlreadyInstrumented);
    }
    miniir::validate(program)?;
    let class = classify(program);
    let funcs = program
        .funcs
        .iter()
        .map(|f| instrument_function(program, &class, f))
        .collect();
    let out = Program {
        instrumented: true,
        globals: program.globals.clone(),
        externs: program.externs.clone(),
        funcs,
    };
    miniir::validate(&out)?;
    lint(&out)?;
    Ok(out)
}

/// Verifies that an instrumented program checks every access it must:
/// each load and store goes through a check result or a Safe object
/// directly, no raw allocator calls remain, and pointers handed to
/// uninstrumented code are stripped.
pub fn lint(program: &Program) -> Result<(), InstrumentError> {
    for f in &program.funcs {
        let fail = |msg: String| {
            Err(InstrumentError::Lint {
                function: f.name.clone(),
                msg,
            })
        };
        let sites = def_sites(f);
        let def_op = |r: Reg| sites[r.0 as usize].map(|s| &inst_at(f, s).op);
        let direct_ok = |r: Reg| {
            let (root, off) = gep_root(f, &sites, r);
            off.is_some() && matches!(def_op(root), Some(Op::Alloca { .. } | Op::GlobalAddr { .. }))
        };
        for (b, i, inst) in f.insts() {
            let at = || format!("{}:{} `{}`", f.block(b).label, i, miniir::print_inst(f, inst, false));
            match &inst.op {
                Op::Load { ptr, .. } | Op::Store { ptr, .. } => {
                    let ok = match ptr {
                        Operand::Reg(r) => {
                            matches!(def_op(*r), Some(Op::Check { .. } | Op::FastCheck { .. })) || direct_ok(*r)
                        }
                        Operand::Imm(_) => false,
                    };
                    if !ok {
                        return fail(format!("unchecked access at {}", at()));
                    }
                }
                Op::Malloc { .. } | Op::Free { .. } => {
                    return fail(format!("unprotected allocator call at {}", at()));
                }
                Op::Call { callee, args } => {
                    if let Some(ext) = program.extern_decl(callee) {
                        if is_wrapped(callee) {
                            return fail(format!("unwrapped library call at {}", at()));
                        }
                        for (a, t) in args.iter().zip(&ext.params) {
                            let stripped = matches!(a, Operand::Imm(0))
                                || matches!(a.reg().and_then(def_op), Some(Op::Strip { .. }));
                            if *t == Ty::Ptr && !stripped {
                                return fail(format!("signed pointer passed to external code at {}", at()));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }
    Ok(())
}
