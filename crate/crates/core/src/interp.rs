//! Executes mini-IR programs, raw or instrumented, over a simulated address
//! space and sanitizer runtime.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::instrument::{instrument, InstrumentError};
use crate::memspace::{LayoutError, RegionLayout, DEFAULT_HEAP_BYTES};
use crate::miniir::{BinOp, BlockId, CastOp, Function, IrError, MemTy, Op, Operand, Pred, Program, Reg, Ty};
use crate::optpasses::{optimize, OptLevel};
use crate::pacore::{AddressConfig, ObjectId, PtrWord};
use crate::runtime::{padded_size, Builtin, ObjectKind, RangeCheck, Runtime, RuntimeError, Trap, Violation, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_insts: u64,
    pub heap_bytes: u64,
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_insts: 10_000_000,
            heap_bytes: DEFAULT_HEAP_BYTES,
            max_depth: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Stats {
    pub checks_full: u64,
    pub checks_fast: u64,
    pub allocs: u64,
    pub frees: u64,
    pub insts: u64,
}

/// A violation attributed to the source instruction that raised it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationReport {
    pub kind: ViolationKind,
    pub function: String,
    pub inst_index: Option<u32>,
    pub pointer: PtrWord,
    pub found_id: ObjectId,
    pub message: String,
}

impl ViolationReport {
    /// What must agree between differently optimized runs.
    pub fn location(&self) -> (ViolationKind, &str, Option<u32>) {
        (self.kind, &self.function, self.inst_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Completed(i32),
    Violation(ViolationReport),
}

impl Verdict {
    pub fn violation(&self) -> Option<&ViolationReport> {
        match self {
            Verdict::Violation(v) => Some(v),
            Verdict::Completed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub verdict: Verdict,
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("limit exceeded: {0}")]
    LimitExceeded(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error("runtime failure: {0}")]
    Runtime(RuntimeError),
}

impl From<RuntimeError> for ExecError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::HeapExhausted(n) => ExecError::LimitExceeded(format!("heap budget exhausted allocating {n} bytes")),
            e => ExecError::Runtime(e),
        }
    }
}

/// How checks examine the accessed bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckMode {
    /// Id comparison at the first and last byte.
    #[default]
    Endpoints,
    /// Full check of every byte; used as a reference oracle.
    EveryByte,
}

struct FrameLayout {
    /// Offset and size of each alloca, keyed by its result register.
    slots: HashMap<Reg, u64>,
    size: u64,
}

fn layout_frame(f: &Function) -> FrameLayout {
    // zero guard word at the bottom, slots ascending above it
    let mut off = 4;
    let mut slots = HashMap::new();
    for inst in &f.blocks[0].insts {
        if let (Op::Alloca { size }, Some(d)) = (&inst.op, inst.dest) {
            slots.insert(d, off);
            off += padded_size(*size);
        }
    }
    FrameLayout { slots, size: off }
}

struct Frame {
    func: usize,
    regs: Vec<u64>,
    block: BlockId,
    ip: usize,
    base: u64,
    saved_sp: u64,
    ret_dest: Option<Reg>,
}

enum Stop {
    Violation(Violation),
    Exec(ExecError),
}

impl From<Trap> for Stop {
    fn from(t: Trap) -> Self {
        match t {
            Trap::Violation(v) => Stop::Violation(v),
            Trap::Error(e) => Stop::Exec(e.into()),
        }
    }
}

impl From<Violation> for Stop {
    fn from(v: Violation) -> Self {
        Stop::Violation(v)
    }
}

impl From<RuntimeError> for Stop {
    fn from(e: RuntimeError) -> Self {
        Stop::Exec(e.into())
    }
}

impl From<crate::memspace::MemoryFault> for Stop {
    fn from(f: crate::memspace::MemoryFault) -> Self {
        Stop::Violation(f.into())
    }
}

fn norm(ty: Ty, v: u64) -> u64 {
    match ty {
        Ty::I32 => v as i32 as i64 as u64,
        _ => v,
    }
}

fn binop(op: BinOp, ty: Ty, a: u64, b: u64) -> u64 {
    let bits = if ty == Ty::I32 { 32 } else { 64 };
    let sh = (b as u32) & (bits - 1);
    let r = match (op, ty) {
        (BinOp::Add, _) => a.wrapping_add(b),
        (BinOp::Sub, _) => a.wrapping_sub(b),
        (BinOp::Mul, _) => a.wrapping_mul(b),
        (BinOp::And, _) => a & b,
        (BinOp::Or, _) => a | b,
        (BinOp::Xor, _) => a ^ b,
        (BinOp::Shl, _) => a << sh,
        (BinOp::LShr, Ty::I32) => u64::from((a as u32) >> sh),
        (BinOp::LShr, _) => a >> sh,
        (BinOp::AShr, Ty::I32) => ((a as i32) >> sh) as u64,
        (BinOp::AShr, _) => ((a as i64) >> sh) as u64,
    };
    norm(ty, r)
}

fn icmp(pred: Pred, ty: Ty, a: u64, b: u64) -> bool {
    let (sa, sb, ua, ub) = match ty {
        Ty::I32 => (a as i32 as i64, b as i32 as i64, u64::from(a as u32), u64::from(b as u32)),
        _ => (a as i64, b as i64, a, b),
    };
    match pred {
        Pred::Eq => ua == ub,
        Pred::Ne => ua != ub,
        Pred::Slt => sa < sb,
        Pred::Sle => sa <= sb,
        Pred::Sgt => sa > sb,
        Pred::Sge => sa >= sb,
        Pred::Ult => ua < ub,
        Pred::Ule => ua <= ub,
        Pred::Ugt => ua > ub,
        Pred::Uge => ua >= ub,
    }
}

pub struct Interpreter<'p> {
    program: &'p Program,
    rt: Runtime,
    cfg: AddressConfig,
    limits: Limits,
    mode: CheckMode,
    layouts: Vec<FrameLayout>,
    func_index: HashMap<&'p str, usize>,
    globals: HashMap<&'p str, (u64, u64)>,
    stats: Stats,
    sp: u64,
    stack_floor: u64,
}

impl<'p> Interpreter<'p> {
    pub fn new(program: &'p Program, cfg: AddressConfig, seed: u64, limits: Limits) -> Result<Self, ExecError> {
        let layout = RegionLayout::default().with_heap_bytes(limits.heap_bytes);
        let rt = Runtime::new(cfg, layout, seed)?;
        let mut globals = HashMap::new();
        let mut next = layout.globals.base + 4;
        for g in &program.globals {
            let size = padded_size(g.size);
            if next + size > layout.globals.limit {
                return Err(ExecError::LimitExceeded("globals region exhausted".into()));
            }
            globals.insert(g.name.as_str(), (next, g.size));
            // one zero word between consecutive globals
            next += size + 4;
        }
        Ok(Interpreter {
            program,
            rt,
            cfg,
            limits,
            mode: CheckMode::Endpoints,
            layouts: program.funcs.iter().map(layout_frame).collect(),
            func_index: program.funcs.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect(),
            globals,
            stats: Stats::default(),
            sp: layout.stack.limit,
            stack_floor: layout.stack.base,
        })
    }

    pub fn with_mode(mut self, mode: CheckMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn global_base(&self, name: &str) -> Option<u64> {
        self.globals.get(name).map(|g| g.0)
    }

    fn push_frame(&mut self, frames: &mut Vec<Frame>, func: usize, args: &[u64], ret_dest: Option<Reg>) -> Result<(), Stop> {
        if frames.len() >= self.limits.max_depth {
            return Err(Stop::Exec(ExecError::LimitExceeded("call depth".into())));
        }
        let f = &self.program.funcs[func];
        let size = self.layouts[func].size;
        let base = match self.sp.checked_sub(size) {
            Some(b) if b >= self.stack_floor => b,
            _ => return Err(Stop::Exec(ExecError::LimitExceeded("stack exhausted".into()))),
        };
        let mut regs = vec![0u64; f.num_regs()];
        for ((r, ty), v) in f.params.iter().zip(args) {
            regs[r.0 as usize] = norm(*ty, *v);
        }
        frames.push(Frame {
            func,
            regs,
            block: BlockId(0),
            ip: 0,
            base,
            saved_sp: self.sp,
            ret_dest,
        });
        self.sp = base;
        Ok(())
    }

    fn full_check(&self, ptr: PtrWord, width: u64) -> Result<(PtrWord, ObjectId), Violation> {
        match self.mode {
            CheckMode::Endpoints => self.rt.checked_access(ptr, width),
            CheckMode::EveryByte => {
                let mut first = None;
                for k in 0..width {
                    let r = self
                        .rt
                        .checked_access(ptr.offset(k as i64), 1)
                        .map_err(|v| Violation { pointer: ptr, ..v })?;
                    first.get_or_insert(r);
                }
                Ok(first.expect("width is positive"))
            }
        }
    }

    fn lock_out(&self, ptr: PtrWord, base: PtrWord, id: ObjectId) -> u64 {
        if self.cfg.non_address_bits(ptr) == self.cfg.non_address_bits(base) {
            u64::from(id.0)
        } else {
            0
        }
    }

    fn call_external(&mut self, name: &str, args: &[u64]) -> Result<Option<u64>, Stop> {
        let arg = |i: usize| args.get(i).copied().unwrap_or(0);
        if let Some(b) = Builtin::from_name(name) {
            return Ok(Some(self.rt.raw_builtin(b, args)?));
        }
        Ok(match name {
            "ext_alloc" => {
                self.stats.allocs += 1;
                let p = if self.program.instrumented {
                    self.rt.intercepted_external_alloc(arg(0))?
                } else {
                    self.rt.raw_malloc(arg(0))?
                };
                Some(p.0)
            }
            "ext_identity" => Some(arg(0)),
            "ext_store32" => {
                let at = PtrWord(arg(0)).offset(arg(1) as i64);
                self.rt.mem_mut().mem_write(at, 4, arg(2))?;
                None
            }
            "ext_load32" => {
                let at = PtrWord(arg(0)).offset(arg(1) as i64);
                Some(norm(Ty::I32, self.rt.mem().mem_read(at, 4)?))
            }
            "ext_nop" => Some(0),
            other => {
                return Err(Stop::Exec(ExecError::Ir(IrError::Invalid {
                    function: None,
                    msg: format!("no implementation for external @{other}"),
                })))
            }
        })
    }

    /// Runs `main` to completion or to the first violation.
    pub fn run(mut self) -> Result<ExecResult, ExecError> {
        let main = *self
            .func_index
            .get("main")
            .ok_or_else(|| IrError::Invalid {
                function: None,
                msg: "no @main function".into(),
            })?;
        let mut frames = Vec::new();
        let outcome = match self.push_frame(&mut frames, main, &[], None) {
            Ok(()) => self.execute(&mut frames),
            Err(stop) => Err(stop),
        };
        self.stats.checks_full = self.rt.full_checks();
        self.stats.checks_fast = self.rt.fast_checks();
        let verdict = match outcome {
            Ok(code) => Verdict::Completed(code),
            Err(Stop::Violation(v)) => {
                let frame = frames.last().expect("violation inside a frame");
                let f = &self.program.funcs[frame.func];
                let origin = f.blocks[frame.block.index()].insts.get(frame.ip).and_then(|i| i.origin);
                Verdict::Violation(ViolationReport {
                    kind: v.kind,
                    function: f.name.clone(),
                    inst_index: origin,
                    pointer: v.pointer,
                    found_id: v.found_id,
                    message: v.message,
                })
            }
            Err(Stop::Exec(e)) => return Err(e),
        };
        Ok(ExecResult {
            verdict,
            stats: self.stats,
        })
    }

    fn value(frame: &Frame, o: &Operand) -> u64 {
        match o {
            Operand::Reg(r) => frame.regs[r.0 as usize],
            Operand::Imm(v) => *v as u64,
        }
    }

    fn enter_block(&mut self, frame: &mut Frame, target: BlockId) -> Result<(), Stop> {
        let f = &self.program.funcs[frame.func];
        let from = frame.block;
        let insts = &f.blocks[target.index()].insts;
        let mut assigns = Vec::new();
        for inst in insts {
            let Op::Phi { ty, incoming } = &inst.op else { break };
            self.stats.insts += 1;
            let (v, _) = incoming
                .iter()
                .find(|(_, b)| *b == from)
                .expect("validated phi covers every predecessor");
            assigns.push((inst.dest.expect("phi has a result"), norm(*ty, Self::value(frame, v))));
        }
        for (r, v) in &assigns {
            frame.regs[r.0 as usize] = *v;
        }
        frame.block = target;
        frame.ip = assigns.len();
        Ok(())
    }

    fn execute(&mut self, frames: &mut Vec<Frame>) -> Result<i32, Stop> {
        let program = self.program;
        loop {
            self.stats.insts += 1;
            if self.stats.insts > self.limits.max_insts {
                return Err(Stop::Exec(ExecError::LimitExceeded(format!(
                    "more than {} instructions",
                    self.limits.max_insts
                ))));
            }
            let depth = frames.len();
            let frame = frames.last_mut().expect("a frame is active");
            let f = &program.funcs[frame.func];
            let inst = &f.blocks[frame.block.index()].insts[frame.ip];
            let val = |o: &Operand| Self::value(frame, o);
            let mut result: Option<u64> = None;
            let mut next_ip = true;

            match &inst.op {
                Op::Const { ty, value } => result = Some(norm(*ty, *value as u64)),
                Op::Bin { op, ty, lhs, rhs } => result = Some(binop(*op, *ty, val(lhs), val(rhs))),
                Op::Icmp { pred, ty, lhs, rhs } => result = Some(u64::from(icmp(*pred, *ty, val(lhs), val(rhs)))),
                Op::Cast { op, value } => {
                    let v = val(value);
                    result = Some(match op {
                        CastOp::Sext => v as i32 as i64 as u64,
                        CastOp::Zext => u64::from(v as u32),
                        CastOp::Trunc => norm(Ty::I32, v),
                        CastOp::PtrToInt | CastOp::IntToPtr => v,
                    });
                }
                Op::Alloca { .. } => {
                    let d = inst.dest.expect("alloca has a result");
                    result = Some(frame.base + self.layouts[frame.func].slots[&d]);
                }
                Op::GlobalAddr { global } => result = Some(self.globals[global.as_str()].0),
                Op::Gep { base, offset } => result = Some(val(base).wrapping_add(val(offset))),
                Op::Load { ty, ptr } => {
                    let raw = self.rt.mem().mem_read(PtrWord(val(ptr)), ty.width())?;
                    result = Some(match ty {
                        MemTy::I32 => norm(Ty::I32, raw),
                        _ => raw,
                    });
                }
                Op::Store { ty, ptr, value } => {
                    let (p, v) = (val(ptr), val(value));
                    self.rt.mem_mut().mem_write(PtrWord(p), ty.width(), v)?;
                }
                Op::Malloc { size } => {
                    let n = val(size);
                    self.stats.allocs += 1;
                    result = Some(self.rt.raw_malloc(n)?.0);
                }
                Op::Free { ptr } => {
                    let p = val(ptr);
                    self.stats.frees += 1;
                    self.rt.raw_free(PtrWord(p));
                }
                Op::PMalloc { size } => {
                    let n = val(size);
                    self.stats.allocs += 1;
                    result = Some(self.rt.protected_malloc(n)?.0);
                }
                Op::PFree { ptr } => {
                    let p = val(ptr);
                    self.stats.frees += 1;
                    self.rt.protected_free(PtrWord(p))?;
                }
                Op::Call { callee, args } | Op::WCall { callee, args } => {
                    let argv: Vec<u64> = args.iter().map(val).collect();
                    let dest = inst.dest;
                    if let Some(&idx) = self.func_index.get(callee.as_str()) {
                        frame.ip += 1;
                        self.push_frame(frames, idx, &argv, dest)?;
                        continue;
                    }
                    let wrapped = matches!(inst.op, Op::WCall { .. });
                    let ret = if wrapped {
                        let b = Builtin::from_name(callee).expect("validated wrapper");
                        let range = match self.mode {
                            CheckMode::Endpoints => RangeCheck::Endpoints,
                            CheckMode::EveryByte => RangeCheck::EveryByte,
                        };
                        Some(self.rt.wrapper_call(b, &argv, range)?)
                    } else {
                        self.call_external(callee, &argv)?
                    };
                    let frame = frames.last_mut().unwrap();
                    if let (Some(d), Some(v)) = (dest, ret) {
                        let ty = program.signature(callee).and_then(|s| s.1).unwrap_or(Ty::I64);
                        frame.regs[d.0 as usize] = norm(ty, v);
                    }
                    frame.ip += 1;
                    continue;
                }
                Op::Br { target } => {
                    let t = *target;
                    self.enter_block(frame, t)?;
                    next_ip = false;
                }
                Op::CondBr { cond, then_to, else_to } => {
                    let t = if val(cond) as u32 != 0 { *then_to } else { *else_to };
                    self.enter_block(frame, t)?;
                    next_ip = false;
                }
                Op::Phi { .. } => unreachable!("phis are evaluated on block entry"),
                Op::Ret { value } => {
                    let v = value.as_ref().map(val).unwrap_or(0);
                    if depth == 1 {
                        return Ok(v as i32);
                    }
                    let done = frames.pop().unwrap();
                    self.sp = done.saved_sp;
                    let caller = frames.last_mut().unwrap();
                    if let Some(d) = done.ret_dest {
                        caller.regs[d.0 as usize] = v;
                    }
                    continue;
                }
                Op::Sign { ptr, size } => {
                    let p = PtrWord(val(ptr));
                    result = Some(self.rt.protect_object(p, *size, ObjectKind::Stack)?.0);
                }
                Op::Unprotect { ptr, size } => {
                    let p = PtrWord(val(ptr));
                    self.rt.release_object(p, *size)?;
                }
                Op::GpptInit { global } => {
                    let (base, size) = self.globals[global.as_str()];
                    self.rt.gppt_init(global, PtrWord(base), size)?;
                }
                Op::GpptLoad { global } => result = Some(self.rt.gppt_load(global)?.0),
                Op::Check { width, ptr, token } => {
                    let p = PtrWord(val(ptr));
                    let (raw, id) = self.full_check(p, *width)?;
                    result = Some(raw.0);
                    if let Some(t) = token {
                        frame.regs[t.0 as usize] = u64::from(id.0);
                    }
                }
                Op::FastCheck {
                    width,
                    ptr,
                    lock,
                    base,
                    token,
                } => {
                    let (p, lock, base) = (PtrWord(val(ptr)), val(lock), PtrWord(val(base)));
                    let raw = if lock == 0 || self.mode == CheckMode::EveryByte {
                        self.full_check(p, *width)?.0
                    } else {
                        self.rt.fast_check(p, *width, ObjectId(lock as u32), base)?
                    };
                    result = Some(raw.0);
                    if let Some(t) = token {
                        let id = self.rt.id_at(raw);
                        frame.regs[t.0 as usize] = self.lock_out(p, base, id);
                    }
                }
                Op::Strip { ptr } => result = Some(self.cfg.strip(PtrWord(val(ptr))).0),
                Op::Resign { ptr } => result = Some(self.rt.resign_return(PtrWord(val(ptr))).0),
            }
            let frame = frames.last_mut().unwrap();
            if let (Some(d), Some(v)) = (inst.dest, result) {
                frame.regs[d.0 as usize] = v;
            }
            if next_ip {
                frame.ip += 1;
            }
        }
    }
}

/// Executes a program as given: instrumented programs with checks, plain
/// programs without any protection.
pub fn run(program: &Program, cfg: AddressConfig, seed: u64, limits: Limits) -> Result<ExecResult, ExecError> {
    Interpreter::new(program, cfg, seed, limits)?.run()
}

/// Instruments and optimizes a source program.
pub fn prepare(source: &Program, opts: OptLevel) -> Result<Program, ExecError> {
    Ok(optimize(&instrument(source)?, opts))
}

/// Instrument, optimize and run.
pub fn run_protected(
    source: &Program,
    cfg: AddressConfig,
    seed: u64,
    opts: OptLevel,
    limits: Limits,
) -> Result<ExecResult, ExecError> {
    run(&prepare(source, opts)?, cfg, seed, limits)
}

/// Reference execution: no optimizations and a full check of every byte of
/// every access, including wrapper ranges.
pub fn run_unoptimized_oracle(source: &Program, cfg: AddressConfig, seed: u64, limits: Limits) -> Result<ExecResult, ExecError> {
    let program = instrument(source)?;
    Interpreter::new(&program, cfg, seed, limits)?
        .with_mode(CheckMode::EveryByte)
        .run()
}
