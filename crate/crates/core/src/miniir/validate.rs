use std::collections::HashSet;

use super::ast::*;
use super::dom::{Cfg, DomTree};
use super::IrError;

struct FnCheck<'a> {
    program: &'a Program,
    f: &'a Function,
    types: Vec<Option<Ty>>,
}

impl FnCheck<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        Err(IrError::invalid(Some(&self.f.name), msg))
    }

    fn operand_ty(&self, o: &Operand, want: &[Ty], what: &str) -> Result<(), IrError> {
        match o {
            Operand::Imm(v) => {
                if want.contains(&Ty::I32) || want.contains(&Ty::I64) || *v == 0 {
                    Ok(())
                } else {
                    self.err(format!("{what}: integer literal {v} used as a pointer"))
                }
            }
            Operand::Reg(r) => match self.types.get(r.0 as usize).copied().flatten() {
                Some(t) if want.contains(&t) => Ok(()),
                Some(t) => self.err(format!("{what}: %{} has type {t}", self.f.reg_name(*r))),
                None => self.err(format!("{what}: %{} is never defined", self.f.reg_name(*r))),
            },
        }
    }

    fn result_ty(&self, inst: &Inst) -> Result<Option<Ty>, IrError> {
        Ok(match &inst.op {
            Op::Const { ty, .. } | Op::Bin { ty, .. } | Op::Phi { ty, .. } => Some(*ty),
            Op::Icmp { .. } => Some(Ty::I32),
            Op::Cast { op, .. } => Some(op.result_ty()),
            Op::Alloca { .. }
            | Op::GlobalAddr { .. }
            | Op::Gep { .. }
            | Op::Malloc { .. }
            | Op::PMalloc { .. }
            | Op::Strip { .. }
            | Op::Resign { .. }
            | Op::Sign { .. }
            | Op::GpptLoad { .. }
            | Op::Check { .. }
            | Op::FastCheck { .. } => Some(Ty::Ptr),
            Op::Load { ty, .. } => Some(ty.value_ty()),
            Op::Call { callee, .. } | Op::WCall { callee, .. } => match self.program.signature(callee) {
                Some((_, ret)) => ret,
                None => return self.err(format!("call to undeclared @{callee}")),
            },
            Op::Store { .. }
            | Op::Free { .. }
            | Op::PFree { .. }
            | Op::Br { .. }
            | Op::CondBr { .. }
            | Op::Ret { .. }
            | Op::Unprotect { .. }
            | Op::GpptInit { .. } => None,
        })
    }

    fn collect_types(&mut self) -> Result<(), IrError> {
        let mut defined = vec![false; self.f.num_regs()];
        for (r, t) in &self.f.params {
            defined[r.0 as usize] = true;
            self.types[r.0 as usize] = Some(*t);
        }
        for (_, _, inst) in self.f.insts() {
            let ty = self.result_ty(inst)?;
            match (inst.dest, ty) {
                (Some(d), Some(t)) => {
                    if std::mem::replace(&mut defined[d.0 as usize], true) {
                        return self.err(format!("%{} defined more than once", self.f.reg_name(d)));
                    }
                    self.types[d.0 as usize] = Some(t);
                }
                (Some(d), None) => {
                    return self.err(format!("%{} receives no value", self.f.reg_name(d)));
                }
                (None, Some(_)) if !matches!(inst.op, Op::Call { .. } | Op::WCall { .. }) => {
                    return self.err("value-producing instruction without a result register");
                }
                _ => {}
            }
            if let Some(t) = inst.op.extra_def() {
                if std::mem::replace(&mut defined[t.0 as usize], true) {
                    return self.err(format!("%{} defined more than once", self.f.reg_name(t)));
                }
                self.types[t.0 as usize] = Some(Ty::I64);
            }
        }
        Ok(())
    }

    fn check_call(&self, callee: &str, args: &[Operand]) -> Result<(), IrError> {
        let Some((params, _)) = self.program.signature(callee) else {
            return self.err(format!("call to undeclared @{callee}"));
        };
        if params.len() != args.len() {
            return self.err(format!("@{callee} takes {} arguments, got {}", params.len(), args.len()));
        }
        for (i, (a, t)) in args.iter().zip(&params).enumerate() {
            self.operand_ty(a, &[*t], &format!("argument {i} of @{callee}"))?;
        }
        Ok(())
    }

    fn check_inst(&self, b: BlockId, inst: &Inst) -> Result<(), IrError> {
        use Ty::*;
        if inst.op.is_instrumentation() && !self.program.instrumented {
            return self.err("instrumentation operation in an uninstrumented program");
        }
        match &inst.op {
            Op::Const { ty: Ptr, value } if *value != 0 => return self.err("pointer constants must be null"),
            Op::Const { .. } | Op::GpptInit { .. } | Op::Br { .. } => {}
            Op::Bin { ty, lhs, rhs, .. } | Op::Icmp { ty, lhs, rhs, .. } => {
                if matches!(inst.op, Op::Bin { .. }) && *ty == Ptr {
                    return self.err("arithmetic on pointers must use gep");
                }
                self.operand_ty(lhs, &[*ty], "left operand")?;
                self.operand_ty(rhs, &[*ty], "right operand")?;
            }
            Op::Cast { op, value } => self.operand_ty(value, op.source_tys(), op.name())?,
            Op::Alloca { .. } => {
                if b != BlockId(0) {
                    return self.err("alloca outside the entry block");
                }
            }
            Op::GlobalAddr { global } | Op::GpptLoad { global } => {
                if self.program.global(global).is_none() {
                    return self.err(format!("unknown global @{global}"));
                }
            }
            Op::Gep { base, offset } => {
                self.operand_ty(base, &[Ptr], "gep base")?;
                self.operand_ty(offset, &[I32, I64], "gep offset")?;
            }
            Op::Load { ptr, .. } => self.operand_ty(ptr, &[Ptr], "load address")?,
            Op::Store { ty, ptr, value } => {
                self.operand_ty(ptr, &[Ptr], "store address")?;
                self.operand_ty(value, &[ty.value_ty()], "stored value")?;
            }
            Op::Call { callee, args } => self.check_call(callee, args)?,
            Op::WCall { callee, args } => {
                if !is_wrapped(callee) || self.program.extern_decl(callee).is_none() {
                    return self.err(format!("@{callee} has no checking wrapper"));
                }
                self.check_call(callee, args)?;
            }
            Op::Malloc { size } | Op::PMalloc { size } => self.operand_ty(size, &[I64], "allocation size")?,
            Op::Free { ptr } | Op::PFree { ptr } | Op::Strip { ptr } | Op::Resign { ptr } => {
                self.operand_ty(ptr, &[Ptr], "pointer operand")?
            }
            Op::Sign { ptr, .. } | Op::Unprotect { ptr, .. } | Op::Check { ptr, .. } => {
                self.operand_ty(ptr, &[Ptr], "pointer operand")?
            }
            Op::FastCheck { ptr, lock, base, .. } => {
                self.operand_ty(ptr, &[Ptr], "checked pointer")?;
                self.operand_ty(lock, &[I64], "lock token")?;
                self.operand_ty(base, &[Ptr], "lock base")?;
            }
            Op::CondBr { cond, .. } => self.operand_ty(cond, &[I32], "branch condition")?,
            Op::Phi { ty, incoming } => {
                for (v, _) in incoming {
                    self.operand_ty(v, &[*ty], "phi input")?;
                }
            }
            Op::Ret { value } => match (value, self.f.ret) {
                (None, None) => {}
                (Some(v), Some(t)) => self.operand_ty(v, &[t], "return value")?,
                _ => return self.err("return does not match the function type"),
            },
        }
        Ok(())
    }
}

fn check_function(program: &Program, f: &Function) -> Result<(), IrError> {
    let mut fc = FnCheck {
        program,
        f,
        types: vec![None; f.num_regs()],
    };
    if f.blocks.is_empty() {
        return fc.err("function has no blocks");
    }
    let mut labels = HashSet::new();
    for block in &f.blocks {
        if !labels.insert(block.label.as_str()) {
            return fc.err(format!("duplicate label '{}'", block.label));
        }
        let Some(last) = block.insts.last() else {
            return fc.err(format!("block '{}' is empty", block.label));
        };
        if !last.op.is_terminator() {
            return fc.err(format!("block '{}' does not end in a terminator", block.label));
        }
        let n = block.insts.len();
        if block.insts[..n - 1].iter().any(|i| i.op.is_terminator()) {
            return fc.err(format!("terminator in the middle of block '{}'", block.label));
        }
        let first_non_phi = block.insts.iter().position(|i| !matches!(i.op, Op::Phi { .. })).unwrap_or(n);
        if block.insts[first_non_phi..].iter().any(|i| matches!(i.op, Op::Phi { .. })) {
            return fc.err(format!("phi after other instructions in '{}'", block.label));
        }
        for s in last.op.successors() {
            if s.index() >= f.blocks.len() {
                return fc.err("branch to a missing block");
            }
            if s == BlockId(0) {
                return fc.err("the entry block cannot be a branch target");
            }
        }
    }

    let cfg = Cfg::new(f);
    let dom = DomTree::new(&cfg);
    if let Some(b) = f.block_ids().find(|b| !dom.is_reachable(*b)) {
        return fc.err(format!("block '{}' is unreachable", f.block(b).label));
    }

    fc.collect_types()?;

    let mut def_site = vec![None; f.num_regs()];
    for (b, i, inst) in f.insts() {
        for d in inst.defs() {
            def_site[d.0 as usize] = Some((b, i));
        }
    }
    let params: HashSet<Reg> = f.params.iter().map(|(r, _)| *r).collect();

    for (b, i, inst) in f.insts() {
        fc.check_inst(b, inst)?;
        if let Op::Phi { incoming, .. } = &inst.op {
            let preds = &cfg.preds[b.index()];
            let mut seen = HashSet::new();
            for (_, p) in incoming {
                if !preds.contains(p) || !seen.insert(*p) {
                    return fc.err(format!("phi in '{}' has a bad incoming edge", f.block(b).label));
                }
            }
            if seen.len() != preds.len() {
                return fc.err(format!("phi in '{}' misses a predecessor", f.block(b).label));
            }
            for (v, p) in incoming {
                let Some(r) = v.reg() else { continue };
                if params.contains(&r) {
                    continue;
                }
                match def_site[r.0 as usize] {
                    Some((db, _)) if db == *p || dom.dominates(db, *p) => {}
                    _ => return fc.err(format!("%{} does not dominate its phi edge", f.reg_name(r))),
                }
            }
            continue;
        }
        for o in inst.op.operands() {
            let Some(r) = o.reg() else { continue };
            if params.contains(&r) {
                continue;
            }
            match def_site[r.0 as usize] {
                Some(site) if dom.inst_dominates(site, (b, i)) => {}
                _ => return fc.err(format!("%{} does not dominate its use", f.reg_name(r))),
            }
        }
    }
    Ok(())
}

/// Checks structural, typing and SSA rules.
pub fn validate(program: &Program) -> Result<(), IrError> {
    let mut names = HashSet::new();
    for name in program
        .globals
        .iter()
        .map(|g| &g.name)
        .chain(program.externs.iter().map(|e| &e.name))
        .chain(program.funcs.iter().map(|f| &f.name))
    {
        if !names.insert(name.as_str()) {
            return Err(IrError::invalid(None, format!("symbol @{name} declared twice")));
        }
    }
    for e in &program.externs {
        match library_signature(&e.name) {
            Some((params, ret)) if params == e.params && ret == e.ret => {}
            Some(_) => {
                return Err(IrError::invalid(None, format!("@{} declared with the wrong signature", e.name)));
            }
            None => return Err(IrError::invalid(None, format!("unknown external @{}", e.name))),
        }
    }
    match program.func("main") {
        Some(m) if m.params.is_empty() && m.ret == Some(Ty::I32) => {}
        Some(_) => return Err(IrError::invalid(Some("main"), "main must take no arguments and return i32")),
        None => return Err(IrError::invalid(None, "no @main function")),
    }
    for f in &program.funcs {
        check_function(program, f)?;
    }
    Ok(())
}
