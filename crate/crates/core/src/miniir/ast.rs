use std::fmt;

/// Register value types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ty {
    I32,
    I64,
    Ptr,
}

impl Ty {
    pub fn name(self) -> &'static str {
        match self {
            Ty::I32 => "i32",
            Ty::I64 => "i64",
            Ty::Ptr => "ptr",
        }
    }

    pub fn parse(s: &str) -> Option<Ty> {
        Some(match s {
            "i32" => Ty::I32,
            "i64" => Ty::I64,
            "ptr" => Ty::Ptr,
            _ => return None,
        })
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Types of memory accesses. `i8` loads zero-extend to `i32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemTy {
    I8,
    I32,
    I64,
    Ptr,
}

impl MemTy {
    pub fn width(self) -> u64 {
        match self {
            MemTy::I8 => 1,
            MemTy::I32 => 4,
            MemTy::I64 | MemTy::Ptr => 8,
        }
    }

    pub fn value_ty(self) -> Ty {
        match self {
            MemTy::I8 | MemTy::I32 => Ty::I32,
            MemTy::I64 => Ty::I64,
            MemTy::Ptr => Ty::Ptr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemTy::I8 => "i8",
            MemTy::I32 => "i32",
            MemTy::I64 => "i64",
            MemTy::Ptr => "ptr",
        }
    }

    pub fn parse(s: &str) -> Option<MemTy> {
        Some(match s {
            "i8" => MemTy::I8,
            "i32" => MemTy::I32,
            "i64" => MemTy::I64,
            "ptr" => MemTy::Ptr,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub u32);

impl BlockId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
}

impl Operand {
    pub fn reg(self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

impl From<Reg> for Operand {
    fn from(r: Reg) -> Self {
        Operand::Reg(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    LShr,
    AShr,
}

impl BinOp {
    pub const ALL: [BinOp; 9] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::LShr,
        BinOp::AShr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::LShr => "lshr",
            BinOp::AShr => "ashr",
        }
    }

    pub fn parse(s: &str) -> Option<BinOp> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pred {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
    Ult,
    Ule,
    Ugt,
    Uge,
}

impl Pred {
    pub const ALL: [Pred; 10] = [
        Pred::Eq,
        Pred::Ne,
        Pred::Slt,
        Pred::Sle,
        Pred::Sgt,
        Pred::Sge,
        Pred::Ult,
        Pred::Ule,
        Pred::Ugt,
        Pred::Uge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pred::Eq => "eq",
            Pred::Ne => "ne",
            Pred::Slt => "slt",
            Pred::Sle => "sle",
            Pred::Sgt => "sgt",
            Pred::Sge => "sge",
            Pred::Ult => "ult",
            Pred::Ule => "ule",
            Pred::Ugt => "ugt",
            Pred::Uge => "uge",
        }
    }

    pub fn parse(s: &str) -> Option<Pred> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CastOp {
    /// i32 to i64, sign extending.
    Sext,
    /// i32 to i64, zero extending.
    Zext,
    /// i64 to i32.
    Trunc,
    PtrToInt,
    IntToPtr,
}

impl CastOp {
    pub fn name(self) -> &'static str {
        match self {
            CastOp::Sext => "sext.i64",
            CastOp::Zext => "zext.i64",
            CastOp::Trunc => "trunc.i32",
            CastOp::PtrToInt => "ptrtoint",
            CastOp::IntToPtr => "inttoptr",
        }
    }

    pub fn result_ty(self) -> Ty {
        match self {
            CastOp::Sext | CastOp::Zext | CastOp::PtrToInt => Ty::I64,
            CastOp::Trunc => Ty::I32,
            CastOp::IntToPtr => Ty::Ptr,
        }
    }

    /// Accepted operand types.
    pub fn source_tys(self) -> &'static [Ty] {
        match self {
            CastOp::Sext | CastOp::Zext => &[Ty::I32],
            CastOp::Trunc => &[Ty::I64],
            CastOp::PtrToInt => &[Ty::Ptr],
            CastOp::IntToPtr => &[Ty::I64, Ty::I32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Const { ty: Ty, value: i64 },
    Bin { op: BinOp, ty: Ty, lhs: Operand, rhs: Operand },
    Icmp { pred: Pred, ty: Ty, lhs: Operand, rhs: Operand },
    Cast { op: CastOp, value: Operand },
    Alloca { size: u64 },
    GlobalAddr { global: String },
    Gep { base: Operand, offset: Operand },
    Load { ty: MemTy, ptr: Operand },
    Store { ty: MemTy, ptr: Operand, value: Operand },
    Call { callee: String, args: Vec<Operand> },
    Malloc { size: Operand },
    Free { ptr: Operand },
    Br { target: BlockId },
    CondBr { cond: Operand, then_to: BlockId, else_to: BlockId },
    Phi { ty: Ty, incoming: Vec<(Operand, BlockId)> },
    Ret { value: Option<Operand> },

    // Only present in instrumented programs.
    Sign { ptr: Operand, size: u64 },
    Unprotect { ptr: Operand, size: u64 },
    GpptInit { global: String },
    GpptLoad { global: String },
    Check { width: u64, ptr: Operand, token: Option<Reg> },
    FastCheck { width: u64, ptr: Operand, lock: Operand, base: Operand, token: Option<Reg> },
    PMalloc { size: Operand },
    PFree { ptr: Operand },
    Strip { ptr: Operand },
    Resign { ptr: Operand },
    WCall { callee: String, args: Vec<Operand> },
}

impl Op {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Br { .. } | Op::CondBr { .. } | Op::Ret { .. })
    }

    pub fn is_instrumentation(&self) -> bool {
        matches!(
            self,
            Op::Sign { .. }
                | Op::Unprotect { .. }
                | Op::GpptInit { .. }
                | Op::GpptLoad { .. }
                | Op::Check { .. }
                | Op::FastCheck { .. }
                | Op::PMalloc { .. }
                | Op::PFree { .. }
                | Op::Strip { .. }
                | Op::Resign { .. }
                | Op::WCall { .. }
        )
    }

    pub fn successors(&self) -> Vec<BlockId> {
        match self {
            Op::Br { target } => vec![*target],
            Op::CondBr { then_to, else_to, .. } => vec![*then_to, *else_to],
            _ => Vec::new(),
        }
    }

    /// Operands read by the operation, in textual order.
    pub fn operands(&self) -> Vec<Operand> {
        match self {
            Op::Const { .. } | Op::Alloca { .. } | Op::GlobalAddr { .. } | Op::Br { .. } => Vec::new(),
            Op::GpptInit { .. } | Op::GpptLoad { .. } => Vec::new(),
            Op::Bin { lhs, rhs, .. } | Op::Icmp { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Cast { value, .. } => vec![*value],
            Op::Gep { base, offset } => vec![*base, *offset],
            Op::Load { ptr, .. } => vec![*ptr],
            Op::Store { ptr, value, .. } => vec![*ptr, *value],
            Op::Call { args, .. } | Op::WCall { args, .. } => args.clone(),
            Op::Malloc { size } | Op::PMalloc { size } => vec![*size],
            Op::Free { ptr } | Op::PFree { ptr } | Op::Strip { ptr } | Op::Resign { ptr } => vec![*ptr],
            Op::CondBr { cond, .. } => vec![*cond],
            Op::Phi { incoming, .. } => incoming.iter().map(|(v, _)| *v).collect(),
            Op::Ret { value } => value.iter().copied().collect(),
            Op::Sign { ptr, .. } | Op::Unprotect { ptr, .. } | Op::Check { ptr, .. } => vec![*ptr],
            Op::FastCheck { ptr, lock, base, .. } => vec![*ptr, *lock, *base],
        }
    }

    pub fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Op::Const { .. } | Op::Alloca { .. } | Op::GlobalAddr { .. } | Op::Br { .. } => Vec::new(),
            Op::GpptInit { .. } | Op::GpptLoad { .. } => Vec::new(),
            Op::Bin { lhs, rhs, .. } | Op::Icmp { lhs, rhs, .. } => vec![lhs, rhs],
            Op::Cast { value, .. } => vec![value],
            Op::Gep { base, offset } => vec![base, offset],
            Op::Load { ptr, .. } => vec![ptr],
            Op::Store { ptr, value, .. } => vec![ptr, value],
            Op::Call { args, .. } | Op::WCall { args, .. } => args.iter_mut().collect(),
            Op::Malloc { size } | Op::PMalloc { size } => vec![size],
            Op::Free { ptr } | Op::PFree { ptr } | Op::Strip { ptr } | Op::Resign { ptr } => vec![ptr],
            Op::CondBr { cond, .. } => vec![cond],
            Op::Phi { incoming, .. } => incoming.iter_mut().map(|(v, _)| v).collect(),
            Op::Ret { value } => value.iter_mut().collect(),
            Op::Sign { ptr, .. } | Op::Unprotect { ptr, .. } | Op::Check { ptr, .. } => vec![ptr],
            Op::FastCheck { ptr, lock, base, .. } => vec![ptr, lock, base],
        }
    }

    /// Secondary result register (the lock token of checks).
    pub fn extra_def(&self) -> Option<Reg> {
        match self {
            Op::Check { token, .. } | Op::FastCheck { token, .. } => *token,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inst {
    pub dest: Option<Reg>,
    pub op: Op,
    /// Index of the source instruction this one stems from.
    pub origin: Option<u32>,
}

impl Inst {
    pub fn new(dest: Option<Reg>, op: Op, origin: Option<u32>) -> Self {
        Inst { dest, op, origin }
    }

    pub fn defs(&self) -> impl Iterator<Item = Reg> {
        self.dest.into_iter().chain(self.op.extra_def())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Inst>,
}

impl Block {
    pub fn terminator(&self) -> Option<&Inst> {
        self.insts.last().filter(|i| i.op.is_terminator())
    }

    pub fn successors(&self) -> Vec<BlockId> {
        self.terminator().map(|t| t.op.successors()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<(Reg, Ty)>,
    pub ret: Option<Ty>,
    pub blocks: Vec<Block>,
    /// Register names, indexed by `Reg`.
    pub reg_names: Vec<String>,
}

impl Function {
    pub fn new(name: impl Into<String>, ret: Option<Ty>) -> Self {
        Function {
            name: name.into(),
            params: Vec::new(),
            ret,
            blocks: Vec::new(),
            reg_names: Vec::new(),
        }
    }

    pub fn reg_name(&self, r: Reg) -> &str {
        &self.reg_names[r.0 as usize]
    }

    pub fn num_regs(&self) -> usize {
        self.reg_names.len()
    }

    pub fn find_reg(&self, name: &str) -> Option<Reg> {
        self.reg_names.iter().position(|n| n == name).map(|i| Reg(i as u32))
    }

    /// Adds a register named `hint`, suffixed to keep names unique.
    pub fn fresh_reg(&mut self, hint: &str) -> Reg {
        let mut name = hint.to_string();
        let mut n = 0;
        while self.reg_names.contains(&name) {
            n += 1;
            name = format!("{hint}.{n}");
        }
        self.reg_names.push(name);
        Reg(self.reg_names.len() as u32 - 1)
    }

    pub fn block_by_label(&self, label: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.label == label).map(|i| BlockId(i as u32))
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.index()]
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.blocks.len() as u32).map(BlockId)
    }

    pub fn insts(&self) -> impl Iterator<Item = (BlockId, usize, &Inst)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, blk)| blk.insts.iter().enumerate().map(move |(i, inst)| (BlockId(b as u32), i, inst)))
    }

    pub fn inst_count(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len()).sum()
    }

    /// Rewrites every use of `from` into `to`.
    pub fn replace_uses(&mut self, from: Reg, to: Operand) {
        for block in &mut self.blocks {
            for inst in &mut block.insts {
                for operand in inst.op.operands_mut() {
                    if *operand == Operand::Reg(from) {
                        *operand = to;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extern {
    pub name: String,
    pub params: Vec<Ty>,
    pub ret: Option<Ty>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub instrumented: bool,
    pub globals: Vec<Global>,
    pub externs: Vec<Extern>,
    pub funcs: Vec<Function>,
}

impl Program {
    pub fn func(&self, name: &str) -> Option<&Function> {
        self.funcs.iter().find(|f| f.name == name)
    }

    pub fn func_index(&self, name: &str) -> Option<usize> {
        self.funcs.iter().position(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&Global> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn extern_decl(&self, name: &str) -> Option<&Extern> {
        self.externs.iter().find(|e| e.name == name)
    }

    /// Signature of a callee, internal or external.
    pub fn signature(&self, name: &str) -> Option<(Vec<Ty>, Option<Ty>)> {
        if let Some(f) = self.func(name) {
            return Some((f.params.iter().map(|(_, t)| *t).collect(), f.ret));
        }
        self.extern_decl(name).map(|e| (e.params.clone(), e.ret))
    }
}

/// Signatures of the external routines programs may declare.
pub fn library_signature(name: &str) -> Option<(Vec<Ty>, Option<Ty>)> {
    use Ty::*;
    Some(match name {
        "memcpy" | "memmove" => (vec![Ptr, Ptr, I64], Some(Ptr)),
        "memset" => (vec![Ptr, I32, I64], Some(Ptr)),
        "strlen" => (vec![Ptr], Some(I64)),
        "strcpy" => (vec![Ptr, Ptr], Some(Ptr)),
        "ext_alloc" => (vec![I64], Some(Ptr)),
        "ext_identity" => (vec![Ptr], Some(Ptr)),
        "ext_store32" => (vec![Ptr, I64, I32], None),
        "ext_load32" => (vec![Ptr, I64], Some(I32)),
        "ext_nop" => (vec![], Some(I32)),
        _ => return None,
    })
}

/// External routines replaced by checking wrappers.
pub fn is_wrapped(name: &str) -> bool {
    matches!(name, "memcpy" | "memmove" | "memset" | "strlen" | "strcpy")
}
