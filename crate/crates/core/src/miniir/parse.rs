use std::collections::HashMap;

use super::ast::*;
use super::IrError;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Punct(char),
    Arrow,
    Word(String),
}

/// Tokens of one line with their 1-based columns.
fn tokenize(line: &str, lineno: usize) -> Result<(Vec<Tok>, Vec<usize>), IrError> {
    let mut toks = Vec::new();
    let mut cols = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        let col = line.len() - chars.clone().map(char::len_utf8).sum::<usize>() + 1;
        if !c.is_whitespace() && c != ';' {
            cols.push(col);
        }
        if c.is_whitespace() {
            chars.next();
        } else if c == ';' {
            break;
        } else if "()[],:{}=".contains(c) {
            toks.push(Tok::Punct(c));
            chars.next();
        } else if c == '-' && line_peek_arrow(&mut chars) {
            toks.push(Tok::Arrow);
        } else if c.is_ascii_alphanumeric() || "%@_.!-".contains(c) {
            let mut word = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || "%@_.!-".contains(c) {
                    if c == '-' && !word.is_empty() {
                        break;
                    }
                    word.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            toks.push(Tok::Word(word));
        } else {
            return Err(IrError::parse(lineno, col, format!("unexpected character '{c}'")));
        }
    }
    Ok((toks, cols))
}

fn line_peek_arrow(chars: &mut std::iter::Peekable<std::str::Chars<'_>>) -> bool {
    let mut ahead = chars.clone();
    ahead.next();
    if ahead.peek() == Some(&'>') {
        chars.next();
        chars.next();
        true
    } else {
        false
    }
}

pub(crate) fn parse_int(s: &str) -> Option<i64> {
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let magnitude = if let Some(hex) = digits.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()?
    } else {
        digits.parse::<u64>().ok()?
    };
    Some(if neg {
        (magnitude as i64).wrapping_neg()
    } else {
        magnitude as i64
    })
}

struct Cursor<'a> {
    toks: &'a [Tok],
    cols: &'a [usize],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        let col = self
            .cols
            .get(self.pos.saturating_sub(1).min(self.cols.len().saturating_sub(1)))
            .copied()
            .unwrap_or(1);
        Err(IrError::parse(self.line, col, msg))
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos)
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn word(&mut self) -> Result<&'a str, IrError> {
        match self.next() {
            Some(Tok::Word(w)) => Ok(w),
            other => self.err(format!("expected a word, found {other:?}")),
        }
    }

    fn punct(&mut self, c: char) -> Result<(), IrError> {
        match self.next() {
            Some(Tok::Punct(p)) if *p == c => Ok(()),
            other => self.err(format!("expected '{c}', found {other:?}")),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn symbol(&mut self) -> Result<&'a str, IrError> {
        let w = self.word()?;
        match w.strip_prefix('@') {
            Some(name) if !name.is_empty() => Ok(name),
            _ => self.err(format!("expected @symbol, found '{w}'")),
        }
    }

    fn size(&mut self) -> Result<u64, IrError> {
        let w = self.word()?;
        match parse_int(w) {
            Some(v) if v >= 0 => Ok(v as u64),
            _ => self.err(format!("expected a size, found '{w}'")),
        }
    }

    fn ret_ty(&mut self) -> Result<Option<Ty>, IrError> {
        match self.next() {
            Some(Tok::Arrow) => {}
            other => return self.err(format!("expected '->', found {other:?}")),
        }
        let w = self.word()?;
        if w == "void" {
            return Ok(None);
        }
        match Ty::parse(w) {
            Some(t) => Ok(Some(t)),
            None => self.err(format!("unknown type '{w}'")),
        }
    }

    fn ty(&mut self) -> Result<Ty, IrError> {
        let w = self.word()?;
        Ty::parse(w).map_or_else(|| self.err(format!("unknown type '{w}'")), Ok)
    }

    fn finish(&self) -> Result<(), IrError> {
        if self.at_end() {
            Ok(())
        } else {
            Cursor { pos: self.pos + 1, ..*self }.err(format!("trailing tokens starting at {:?}", self.toks[self.pos]))
        }
    }
}

struct FuncBuilder {
    func: Function,
    regs: HashMap<String, Reg>,
    labels: HashMap<String, BlockId>,
    label_lines: Vec<(String, usize)>,
    next_origin: u32,
}

impl FuncBuilder {
    fn reg(&mut self, name: &str) -> Reg {
        if let Some(r) = self.regs.get(name) {
            return *r;
        }
        let r = Reg(self.func.reg_names.len() as u32);
        self.func.reg_names.push(name.to_string());
        self.regs.insert(name.to_string(), r);
        r
    }

    fn label(&mut self, name: &str, line: usize) -> BlockId {
        if let Some(b) = self.labels.get(name) {
            return *b;
        }
        let id = BlockId(self.label_lines.len() as u32);
        self.labels.insert(name.to_string(), id);
        self.label_lines.push((name.to_string(), line));
        id
    }

    fn operand(&mut self, cur: &mut Cursor<'_>) -> Result<Operand, IrError> {
        let w = cur.word()?;
        if let Some(name) = w.strip_prefix('%') {
            if name.is_empty() {
                return cur.err("empty register name");
            }
            return Ok(Operand::Reg(self.reg(name)));
        }
        if w == "null" {
            return Ok(Operand::Imm(0));
        }
        match parse_int(w) {
            Some(v) => Ok(Operand::Imm(v)),
            None => cur.err(format!("expected an operand, found '{w}'")),
        }
    }

    fn dest_reg(&mut self, cur: &mut Cursor<'_>) -> Result<Reg, IrError> {
        let w = cur.word()?;
        match w.strip_prefix('%') {
            Some(name) if !name.is_empty() => Ok(self.reg(name)),
            _ => cur.err(format!("expected a register, found '{w}'")),
        }
    }

    fn block_ref(&mut self, cur: &mut Cursor<'_>) -> Result<BlockId, IrError> {
        let line = cur.line;
        let w = cur.word()?;
        Ok(self.label(w, line))
    }
}

/// Parses program text. Instrumentation operations are accepted only when
/// the text starts with the `instrumented` directive.
pub fn parse(text: &str) -> Result<Program, IrError> {
    let mut program = Program::default();
    let mut current: Option<FuncBuilder> = None;
    let mut blocks: Vec<Option<Block>> = Vec::new();
    let mut open_block: Option<BlockId> = None;
    let mut def_order: Vec<BlockId> = Vec::new();
    let mut seen_decl = false;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let (toks, cols) = tokenize(raw, lineno)?;
        if toks.is_empty() {
            continue;
        }
        let mut cur = Cursor {
            toks: &toks,
            cols: &cols,
            pos: 0,
            line: lineno,
        };

        if let Some(fb) = current.as_mut() {
            if toks == [Tok::Punct('}')] {
                let mut fb = current.take().unwrap();
                if blocks.len() != fb.label_lines.len() {
                    blocks.resize(fb.label_lines.len(), None);
                }
                if let Some(i) = blocks.iter().position(Option::is_none) {
                    let (name, line) = &fb.label_lines[i];
                    return Err(IrError::parse(*line, 1, format!("undefined label '{name}'")));
                }
                // number blocks in definition order
                let mut remap = vec![BlockId(0); blocks.len()];
                for (new, old) in def_order.iter().enumerate() {
                    remap[old.index()] = BlockId(new as u32);
                }
                let mut slots: Vec<Option<Block>> = std::mem::take(&mut blocks);
                for old in def_order.drain(..) {
                    let mut block = slots[old.index()].take().unwrap();
                    for inst in &mut block.insts {
                        remap_targets(&mut inst.op, &remap);
                    }
                    fb.func.blocks.push(block);
                }
                program.funcs.push(fb.func);
                open_block = None;
                continue;
            }
            if let [Tok::Word(label), Tok::Punct(':')] = toks.as_slice() {
                let id = fb.label(label, lineno);
                if blocks.len() <= id.index() {
                    blocks.resize(id.index() + 1, None);
                }
                if blocks[id.index()].is_some() {
                    return cur.err(format!("duplicate label '{label}'"));
                }
                blocks[id.index()] = Some(Block {
                    label: label.clone(),
                    insts: Vec::new(),
                });
                open_block = Some(id);
                def_order.push(id);
                continue;
            }
            let Some(bid) = open_block else {
                return cur.err("instruction outside of a block");
            };
            let inst = parse_inst(fb, &mut cur, program.instrumented)?;
            if blocks.len() <= bid.index() {
                blocks.resize(bid.index() + 1, None);
            }
            blocks[bid.index()].as_mut().unwrap().insts.push(inst);
            continue;
        }

        match cur.word()? {
            "instrumented" => {
                if seen_decl {
                    return cur.err("'instrumented' must precede all declarations");
                }
                cur.finish()?;
                program.instrumented = true;
            }
            "global" => {
                let name = cur.symbol()?.to_string();
                let size = cur.size()?;
                cur.finish()?;
                program.globals.push(Global { name, size });
            }
            "extern" => {
                let name = cur.symbol()?.to_string();
                cur.punct('(')?;
                let mut params = Vec::new();
                if !cur.eat(')') {
                    loop {
                        params.push(cur.ty()?);
                        if cur.eat(')') {
                            break;
                        }
                        cur.punct(',')?;
                    }
                }
                let ret = cur.ret_ty()?;
                cur.finish()?;
                program.externs.push(Extern { name, params, ret });
            }
            "func" => {
                let name = cur.symbol()?.to_string();
                let mut fb = FuncBuilder {
                    func: Function::new(name, None),
                    regs: HashMap::new(),
                    labels: HashMap::new(),
                    label_lines: Vec::new(),
                    next_origin: 0,
                };
                cur.punct('(')?;
                if !cur.eat(')') {
                    loop {
                        let r = fb.dest_reg(&mut cur)?;
                        if fb.func.params.iter().any(|(p, _)| *p == r) {
                            return cur.err("duplicate parameter");
                        }
                        cur.punct(':')?;
                        let t = cur.ty()?;
                        fb.func.params.push((r, t));
                        if cur.eat(')') {
                            break;
                        }
                        cur.punct(',')?;
                    }
                }
                fb.func.ret = cur.ret_ty()?;
                cur.punct('{')?;
                cur.finish()?;
                current = Some(fb);
                blocks.clear();
                def_order.clear();
            }
            other => return cur.err(format!("unexpected '{other}' at top level")),
        }
        seen_decl = true;
    }
    if current.is_some() {
        return Err(IrError::parse(text.lines().count(), 1, "unterminated function body"));
    }
    Ok(program)
}

fn remap_targets(op: &mut Op, remap: &[BlockId]) {
    match op {
        Op::Br { target } => *target = remap[target.index()],
        Op::CondBr { then_to, else_to, .. } => {
            *then_to = remap[then_to.index()];
            *else_to = remap[else_to.index()];
        }
        Op::Phi { incoming, .. } => {
            for (_, b) in incoming {
                *b = remap[b.index()];
            }
        }
        _ => {}
    }
}

fn width_suffix(cur: &Cursor<'_>, s: Option<&str>) -> Result<u64, IrError> {
    match s.and_then(|s| s.parse::<u64>().ok()) {
        Some(w @ (1 | 4 | 8)) => Ok(w),
        _ => cur.err("check width must be one of 1, 4, 8"),
    }
}

fn parse_args(fb: &mut FuncBuilder, cur: &mut Cursor<'_>) -> Result<(String, Vec<Operand>), IrError> {
    let callee = cur.symbol()?.to_string();
    cur.punct('(')?;
    let mut args = Vec::new();
    if !cur.eat(')') {
        loop {
            args.push(fb.operand(cur)?);
            if cur.eat(')') {
                break;
            }
            cur.punct(',')?;
        }
    }
    Ok((callee, args))
}

fn parse_inst(fb: &mut FuncBuilder, cur: &mut Cursor<'_>, instrumented: bool) -> Result<Inst, IrError> {
    let mut dests = Vec::new();
    let has_assign = cur.toks.contains(&Tok::Punct('='));
    if has_assign {
        loop {
            dests.push(fb.dest_reg(cur)?);
            if cur.eat('=') {
                break;
            }
            cur.punct(',')?;
        }
    }

    let mut origin = None;
    let mut toks_end = cur.toks.len();
    if let Some(Tok::Word(w)) = cur.toks.last() {
        if let Some(n) = w.strip_prefix('!') {
            match n.parse::<u32>() {
                Ok(n) => origin = Some(n),
                Err(_) => return cur.err(format!("bad origin marker '{w}'")),
            }
            toks_end -= 1;
        }
    }
    let mut body = Cursor {
        toks: &cur.toks[..toks_end],
        cols: cur.cols,
        pos: cur.pos,
        line: cur.line,
    };
    let cur = &mut body;

    let opword = cur.word()?;
    let mut parts = opword.split('.');
    let mnemonic = parts.next().unwrap_or_default();
    let suffix: Vec<&str> = parts.collect();
    let suffix_ty = |cur: &Cursor<'_>, i: usize| -> Result<Ty, IrError> {
        suffix
            .get(i)
            .and_then(|s| Ty::parse(s))
            .map_or_else(|| cur.err(format!("'{opword}' needs a type suffix")), Ok)
    };
    let suffix_memty = |cur: &Cursor<'_>| -> Result<MemTy, IrError> {
        suffix
            .first()
            .and_then(|s| MemTy::parse(s))
            .map_or_else(|| cur.err(format!("'{opword}' needs a memory type suffix")), Ok)
    };

    let mut token = None;
    let op = match mnemonic {
        "const" => {
            let ty = suffix_ty(cur, 0)?;
            let w = cur.word()?;
            let value = if w == "null" {
                0
            } else {
                parse_int(w).map_or_else(|| cur.err(format!("bad constant '{w}'")), Ok)?
            };
            Op::Const { ty, value }
        }
        m if BinOp::parse(m).is_some() => {
            let ty = suffix_ty(cur, 0)?;
            let lhs = fb.operand(cur)?;
            cur.punct(',')?;
            let rhs = fb.operand(cur)?;
            Op::Bin {
                op: BinOp::parse(m).unwrap(),
                ty,
                lhs,
                rhs,
            }
        }
        "icmp" => {
            let pred = suffix
                .first()
                .and_then(|s| Pred::parse(s))
                .map_or_else(|| cur.err("icmp needs a predicate"), Ok)?;
            let ty = suffix_ty(cur, 1)?;
            let lhs = fb.operand(cur)?;
            cur.punct(',')?;
            let rhs = fb.operand(cur)?;
            Op::Icmp { pred, ty, lhs, rhs }
        }
        "sext" | "zext" | "trunc" | "ptrtoint" | "inttoptr" => {
            let op = match opword {
                "sext.i64" => CastOp::Sext,
                "zext.i64" => CastOp::Zext,
                "trunc.i32" => CastOp::Trunc,
                "ptrtoint" => CastOp::PtrToInt,
                "inttoptr" => CastOp::IntToPtr,
                _ => return cur.err(format!("unknown cast '{opword}'")),
            };
            Op::Cast {
                op,
                value: fb.operand(cur)?,
            }
        }
        "alloca" => Op::Alloca { size: cur.size()? },
        "globaladdr" => Op::GlobalAddr {
            global: cur.symbol()?.to_string(),
        },
        "gep" => {
            let base = fb.operand(cur)?;
            cur.punct(',')?;
            let offset = fb.operand(cur)?;
            Op::Gep { base, offset }
        }
        "load" => Op::Load {
            ty: suffix_memty(cur)?,
            ptr: fb.operand(cur)?,
        },
        "store" => {
            let ty = suffix_memty(cur)?;
            let ptr = fb.operand(cur)?;
            cur.punct(',')?;
            let value = fb.operand(cur)?;
            Op::Store { ty, ptr, value }
        }
        "call" => {
            let (callee, args) = parse_args(fb, cur)?;
            Op::Call { callee, args }
        }
        "malloc" => Op::Malloc { size: fb.operand(cur)? },
        "free" => Op::Free { ptr: fb.operand(cur)? },
        "br" => Op::Br {
            target: fb.block_ref(cur)?,
        },
        "cbr" => {
            let cond = fb.operand(cur)?;
            cur.punct(',')?;
            let then_to = fb.block_ref(cur)?;
            cur.punct(',')?;
            let else_to = fb.block_ref(cur)?;
            Op::CondBr { cond, then_to, else_to }
        }
        "phi" => {
            let ty = suffix_ty(cur, 0)?;
            let mut incoming = Vec::new();
            loop {
                cur.punct('[')?;
                let v = fb.operand(cur)?;
                cur.punct(',')?;
                let b = fb.block_ref(cur)?;
                cur.punct(']')?;
                incoming.push((v, b));
                if !cur.eat(',') {
                    break;
                }
            }
            Op::Phi { ty, incoming }
        }
        "ret" => Op::Ret {
            value: if cur.at_end() { None } else { Some(fb.operand(cur)?) },
        },
        _ if !instrumented => {
            return cur.err(format!("unknown instruction '{opword}'"));
        }
        "sign" | "unprotect" => {
            let ptr = fb.operand(cur)?;
            cur.punct(',')?;
            let size = cur.size()?;
            if mnemonic == "sign" {
                Op::Sign { ptr, size }
            } else {
                Op::Unprotect { ptr, size }
            }
        }
        "gppt" => {
            let global = cur.symbol()?.to_string();
            match suffix.first() {
                Some(&"init") => Op::GpptInit { global },
                Some(&"load") => Op::GpptLoad { global },
                _ => return cur.err(format!("unknown instruction '{opword}'")),
            }
        }
        "check" => {
            let width = width_suffix(cur, suffix.first().copied())?;
            if dests.len() == 2 {
                token = dests.pop();
            }
            Op::Check {
                width,
                ptr: fb.operand(cur)?,
                token,
            }
        }
        "fastcheck" => {
            let width = width_suffix(cur, suffix.first().copied())?;
            if dests.len() == 2 {
                token = dests.pop();
            }
            let ptr = fb.operand(cur)?;
            cur.punct(',')?;
            let lock = fb.operand(cur)?;
            cur.punct(',')?;
            let base = fb.operand(cur)?;
            Op::FastCheck {
                width,
                ptr,
                lock,
                base,
                token,
            }
        }
        "pmalloc" => Op::PMalloc { size: fb.operand(cur)? },
        "pfree" => Op::PFree { ptr: fb.operand(cur)? },
        "strip" => Op::Strip { ptr: fb.operand(cur)? },
        "resign" => Op::Resign { ptr: fb.operand(cur)? },
        "wcall" => {
            let (callee, args) = parse_args(fb, cur)?;
            Op::WCall { callee, args }
        }
        _ => return cur.err(format!("unknown instruction '{opword}'")),
    };
    cur.finish()?;
    if dests.len() > 1 {
        return cur.err("too many result registers");
    }
    if let (Op::Check { .. } | Op::FastCheck { .. }, None) = (&op, dests.first()) {
        return cur.err("checks must name their result");
    }
    let origin = origin.or_else(|| (!instrumented).then_some(fb.next_origin));
    fb.next_origin += 1;
    Ok(Inst {
        dest: dests.first().copied(),
        op,
        origin,
    })
}
