use std::fmt::Write;

use super::ast::*;

fn ty_or_void(t: Option<Ty>) -> &'static str {
    t.map_or("void", Ty::name)
}

fn operand(f: &Function, o: &Operand) -> String {
    match o {
        Operand::Reg(r) => format!("%{}", f.reg_name(*r)),
        Operand::Imm(v) => v.to_string(),
    }
}

fn operands(f: &Function, ops: &[Operand]) -> String {
    ops.iter().map(|o| operand(f, o)).collect::<Vec<_>>().join(", ")
}

fn label(f: &Function, b: BlockId) -> &str {
    &f.block(b).label
}

pub fn print_inst(f: &Function, inst: &Inst, with_origin: bool) -> String {
    let mut s = String::new();
    if let Some(d) = inst.dest {
        s.push_str(&format!("%{}", f.reg_name(d)));
        if let Some(t) = inst.op.extra_def() {
            s.push_str(&format!(", %{}", f.reg_name(t)));
        }
        s.push_str(" = ");
    }
    let o = |x: &Operand| operand(f, x);
    let body = match &inst.op {
        Op::Const { ty, value } => format!("const.{ty} {value}"),
        Op::Bin { op, ty, lhs, rhs } => format!("{}.{ty} {}, {}", op.name(), o(lhs), o(rhs)),
        Op::Icmp { pred, ty, lhs, rhs } => format!("icmp.{}.{ty} {}, {}", pred.name(), o(lhs), o(rhs)),
        Op::Cast { op, value } => format!("{} {}", op.name(), o(value)),
        Op::Alloca { size } => format!("alloca {size}"),
        Op::GlobalAddr { global } => format!("globaladdr @{global}"),
        Op::Gep { base, offset } => format!("gep {}, {}", o(base), o(offset)),
        Op::Load { ty, ptr } => format!("load.{} {}", ty.name(), o(ptr)),
        Op::Store { ty, ptr, value } => format!("store.{} {}, {}", ty.name(), o(ptr), o(value)),
        Op::Call { callee, args } => format!("call @{callee}({})", operands(f, args)),
        Op::Malloc { size } => format!("malloc {}", o(size)),
        Op::Free { ptr } => format!("free {}", o(ptr)),
        Op::Br { target } => format!("br {}", label(f, *target)),
        Op::CondBr { cond, then_to, else_to } => {
            format!("cbr {}, {}, {}", o(cond), label(f, *then_to), label(f, *else_to))
        }
        Op::Phi { ty, incoming } => {
            let arms: Vec<String> = incoming
                .iter()
                .map(|(v, b)| format!("[{}, {}]", o(v), label(f, *b)))
                .collect();
            format!("phi.{ty} {}", arms.join(", "))
        }
        Op::Ret { value: Some(v) } => format!("ret {}", o(v)),
        Op::Ret { value: None } => "ret".to_string(),
        Op::Sign { ptr, size } => format!("sign {}, {size}", o(ptr)),
        Op::Unprotect { ptr, size } => format!("unprotect {}, {size}", o(ptr)),
        Op::GpptInit { global } => format!("gppt.init @{global}"),
        Op::GpptLoad { global } => format!("gppt.load @{global}"),
        Op::Check { width, ptr, .. } => format!("check.{width} {}", o(ptr)),
        Op::FastCheck {
            width, ptr, lock, base, ..
        } => format!("fastcheck.{width} {}, {}, {}", o(ptr), o(lock), o(base)),
        Op::PMalloc { size } => format!("pmalloc {}", o(size)),
        Op::PFree { ptr } => format!("pfree {}", o(ptr)),
        Op::Strip { ptr } => format!("strip {}", o(ptr)),
        Op::Resign { ptr } => format!("resign {}", o(ptr)),
        Op::WCall { callee, args } => format!("wcall @{callee}({})", operands(f, args)),
    };
    s.push_str(&body);
    if with_origin {
        if let Some(n) = inst.origin {
            s.push_str(&format!(" !{n}"));
        }
    }
    s
}

pub fn print_function(out: &mut String, f: &Function, with_origin: bool) {
    let params: Vec<String> = f
        .params
        .iter()
        .map(|(r, t)| format!("%{}: {t}", f.reg_name(*r)))
        .collect();
    let _ = writeln!(out, "func @{}({}) -> {} {{", f.name, params.join(", "), ty_or_void(f.ret));
    for block in &f.blocks {
        let _ = writeln!(out, "{}:", block.label);
        for inst in &block.insts {
            let _ = writeln!(out, "  {}", print_inst(f, inst, with_origin));
        }
    }
    out.push_str("}\n");
}

/// Renders a program in the textual syntax accepted by `parse`.
/// Instrumented programs carry their source-origin markers.
pub fn print(program: &Program) -> String {
    let mut out = String::new();
    if program.instrumented {
        out.push_str("instrumented\n");
    }
    for g in &program.globals {
        let _ = writeln!(out, "global @{} {}", g.name, g.size);
    }
    for e in &program.externs {
        let params: Vec<&str> = e.params.iter().map(|t| t.name()).collect();
        let _ = writeln!(out, "extern @{}({}) -> {}", e.name, params.join(", "), ty_or_void(e.ret));
    }
    for f in &program.funcs {
        out.push('\n');
        print_function(&mut out, f, program.instrumented);
    }
    out
}
