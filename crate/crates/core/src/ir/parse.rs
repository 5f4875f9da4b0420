//! Text front end: tokenizer, recursive-descent parser and validator.
//!
//! ```text
//! inputlen 8                 ; optional, default 64
//! entry main                 ; optional, default `main`
//! table f, g                 ; icall targets
//! func f(v0:u32, entry=b0) -> u32 { b0: v1 = add.u32 v0, 1  ret v1 }
//! ```
//! Newlines are not significant; `;` starts a comment.

use std::collections::HashMap;

use super::*;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i128),
    Punct(char),
    Arrow,
    Eof,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
struct Pos {
    line: u32,
    col: u32,
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, IrError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == ';' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), pos));
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let neg = c == '-';
            if neg {
                i += 1;
            }
            let digits_start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let raw: String = chars[digits_start..i].iter().filter(|&&c| c != '_').collect();
            let parsed = if let Some(hex) = raw.strip_prefix("0x").or_else(|| raw.strip_prefix("0X")) {
                u64::from_str_radix(hex, 16).map(|v| v as i128)
            } else {
                raw.parse::<u64>().map(|v| v as i128)
            };
            let v = parsed.map_err(|_| IrError::Syntax {
                line: pos.line,
                col: pos.col,
                msg: format!("bad integer literal `{raw}`"),
            })?;
            out.push((Tok::Int(if neg { -v } else { v }), pos));
        } else if c == '-' && chars.get(i + 1) == Some(&'>') {
            i += 2;
            out.push((Tok::Arrow, pos));
        } else if "=,:(){}".contains(c) {
            i += 1;
            out.push((Tok::Punct(c), pos));
        } else {
            return Err(IrError::Syntax { line, col, msg: format!("unexpected character `{c}`") });
        }
        col += (i - start) as u32;
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

#[derive(Clone, Debug)]
enum RawOperand {
    Name(String, Pos),
    Int(i128, Pos),
}

impl RawOperand {
    fn pos(&self) -> Pos {
        match self {
            RawOperand::Name(_, p) | RawOperand::Int(_, p) => *p,
        }
    }
}

#[derive(Clone, Debug)]
struct RawInstr {
    dest: Option<(String, Pos)>,
    op: String,
    pos: Pos,
    operands: Vec<RawOperand>,
}

#[derive(Clone, Debug)]
enum RawTerm {
    Jmp(String),
    Br(RawOperand, String, String),
    Ret(Option<RawOperand>),
}

#[derive(Clone, Debug)]
struct RawBlock {
    name: String,
    pos: Pos,
    instrs: Vec<RawInstr>,
    term: RawTerm,
    term_pos: Pos,
}

#[derive(Clone, Debug)]
struct RawFunc {
    name: String,
    pos: Pos,
    params: Vec<(String, Width, Pos)>,
    entry: (String, Pos),
    ret: Option<Width>,
    blocks: Vec<RawBlock>,
}

#[derive(Default)]
struct RawProgram {
    input_len: Option<u32>,
    entry: Option<(String, Pos)>,
    table: Vec<(String, Pos)>,
    funcs: Vec<RawFunc>,
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        let p = self.pos();
        Err(IrError::Syntax { line: p.line, col: p.col, msg: msg.into() })
    }

    fn expect_punct(&mut self, c: char) -> Result<(), IrError> {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected `{c}`, found {}", describe(self.peek())))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<(String, Pos), IrError> {
        match self.bump() {
            (Tok::Ident(s), p) => Ok((s, p)),
            (t, p) => Err(IrError::Syntax { line: p.line, col: p.col, msg: format!("expected identifier, found {}", describe(&t)) }),
        }
    }

    fn int(&mut self) -> Result<(i128, Pos), IrError> {
        match self.bump() {
            (Tok::Int(v), p) => Ok((v, p)),
            (t, p) => Err(IrError::Syntax { line: p.line, col: p.col, msg: format!("expected integer, found {}", describe(&t)) }),
        }
    }

    fn operand(&mut self) -> Result<RawOperand, IrError> {
        match self.bump() {
            (Tok::Ident(s), p) => Ok(RawOperand::Name(s, p)),
            (Tok::Int(v), p) => Ok(RawOperand::Int(v, p)),
            (t, p) => Err(IrError::Syntax { line: p.line, col: p.col, msg: format!("expected operand, found {}", describe(&t)) }),
        }
    }

    fn operand_list(&mut self) -> Result<Vec<RawOperand>, IrError> {
        let mut ops = vec![self.operand()?];
        while self.eat_punct(',') {
            ops.push(self.operand()?);
        }
        Ok(ops)
    }

    fn program(&mut self) -> Result<RawProgram, IrError> {
        let mut raw = RawProgram::default();
        loop {
            match self.peek().clone() {
                Tok::Eof => return Ok(raw),
                Tok::Ident(kw) if kw == "inputlen" => {
                    self.bump();
                    let (v, p) = self.int()?;
                    if !(1..=4096).contains(&v) {
                        return Err(IrError::Syntax { line: p.line, col: p.col, msg: "inputlen must be in 1..=4096".into() });
                    }
                    raw.input_len = Some(v as u32);
                }
                Tok::Ident(kw) if kw == "entry" => {
                    self.bump();
                    raw.entry = Some(self.ident()?);
                }
                Tok::Ident(kw) if kw == "table" => {
                    self.bump();
                    raw.table.push(self.ident()?);
                    while self.eat_punct(',') {
                        raw.table.push(self.ident()?);
                    }
                }
                Tok::Ident(kw) if kw == "func" => {
                    self.bump();
                    raw.funcs.push(self.func()?);
                }
                t => return self.err(format!("expected `func`, `table`, `entry` or `inputlen`, found {}", describe(&t))),
            }
        }
    }

    fn func(&mut self) -> Result<RawFunc, IrError> {
        let (name, pos) = self.ident()?;
        self.expect_punct('(')?;
        let mut params = Vec::new();
        let entry;
        loop {
            let (id, p) = self.ident()?;
            if id == "entry" && *self.peek() == Tok::Punct('=') {
                self.bump();
                entry = self.ident()?;
                break;
            }
            self.expect_punct(':')?;
            let (ty, tp) = self.ident()?;
            let (_, w) = parse_type(&ty).ok_or(IrError::Syntax { line: tp.line, col: tp.col, msg: format!("bad parameter type `{ty}`") })?;
            params.push((id, w, p));
            self.expect_punct(',')?;
        }
        self.expect_punct(')')?;
        let ret = if *self.peek() == Tok::Arrow {
            self.bump();
            let (ty, tp) = self.ident()?;
            let (_, w) = parse_type(&ty).ok_or(IrError::Syntax { line: tp.line, col: tp.col, msg: format!("bad return type `{ty}`") })?;
            Some(w)
        } else {
            None
        };
        self.expect_punct('{')?;
        let mut blocks = Vec::new();
        while !self.eat_punct('}') {
            blocks.push(self.block()?);
        }
        if blocks.is_empty() {
            return Err(IrError::Syntax { line: pos.line, col: pos.col, msg: format!("function `{name}` has no blocks") });
        }
        Ok(RawFunc { name, pos, params, entry, ret, blocks })
    }

    fn block(&mut self) -> Result<RawBlock, IrError> {
        let (name, pos) = self.ident()?;
        self.expect_punct(':')?;
        let mut instrs = Vec::new();
        loop {
            let tpos = self.pos();
            let tok = self.peek().clone();
            let Tok::Ident(word) = tok else {
                return self.err(format!("expected instruction or terminator in block `{name}`, found {}", describe(&tok)));
            };
            if *self.peek2() == Tok::Punct('=') {
                let dest = self.ident()?;
                self.bump();
                let (op, pos) = self.ident()?;
                let operands = self.operand_list()?;
                instrs.push(RawInstr { dest: Some(dest), op, pos, operands });
                continue;
            }
            match word.as_str() {
                "jmp" => {
                    self.bump();
                    let (to, _) = self.ident()?;
                    return Ok(RawBlock { name, pos, instrs, term: RawTerm::Jmp(to), term_pos: tpos });
                }
                "br" => {
                    self.bump();
                    let cond = self.operand()?;
                    self.expect_punct(',')?;
                    let (t, _) = self.ident()?;
                    self.expect_punct(',')?;
                    let (e, _) = self.ident()?;
                    return Ok(RawBlock { name, pos, instrs, term: RawTerm::Br(cond, t, e), term_pos: tpos });
                }
                "ret" => {
                    self.bump();
                    let has_value = match self.peek() {
                        Tok::Int(_) => true,
                        Tok::Ident(_) => *self.peek2() != Tok::Punct(':'),
                        _ => false,
                    };
                    let value = if has_value { Some(self.operand()?) } else { None };
                    return Ok(RawBlock { name, pos, instrs, term: RawTerm::Ret(value), term_pos: tpos });
                }
                w if w.starts_with("arr.store") || w == "call" || w == "icall" => {
                    let (op, pos) = self.ident()?;
                    let operands = self.operand_list()?;
                    instrs.push(RawInstr { dest: None, op, pos, operands });
                }
                _ => return self.err(format!("expected instruction or terminator, found `{word}`")),
            }
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Int(v) => format!("`{v}`"),
        Tok::Punct(c) => format!("`{c}`"),
        Tok::Arrow => "`->`".into(),
        Tok::Eof => "end of input".into(),
    }
}

/// `u32`, `s8`, `32`, `u1`.
fn parse_type(s: &str) -> Option<(Option<Signedness>, Width)> {
    let (sign, digits) = match s.as_bytes().first()? {
        b's' => (Some(Signedness::Signed), &s[1..]),
        b'u' => (Some(Signedness::Unsigned), &s[1..]),
        _ => (None, s),
    };
    Width::new(digits.parse().ok()?).map(|w| (sign, w))
}

fn parse_pred(s: &str) -> Option<CmpPred> {
    Some(match s {
        "eq" => CmpPred::Eq,
        "ne" => CmpPred::Ne,
        "slt" => CmpPred::Slt,
        "sle" => CmpPred::Sle,
        "ult" => CmpPred::Ult,
        "ule" => CmpPred::Ule,
        _ => return None,
    })
}

/// Decoded mnemonic, before operands are resolved.
#[derive(Clone, Copy, Debug)]
enum Mnemonic {
    Const(Width),
    Input(u8),
    Bin(BinOp, Width),
    Cast(CastOp, Width),
    Cmp(CmpPred, Option<Width>),
    ArrAlloc(Width),
    ArrLoad,
    ArrStore,
    Call,
    ICall,
}

fn decode_mnemonic(op: &str) -> Result<Mnemonic, String> {
    let parts: Vec<&str> = op.split('.').collect();
    let bad = || format!("unknown operation `{op}`");
    let ty = |i: usize| parts.get(i).and_then(|t| parse_type(t));
    let arith = |a: ArithOp| -> Result<Mnemonic, String> {
        match ty(1) {
            Some((Some(sign), w)) if parts.len() == 2 && w != Width::B1 => Ok(Mnemonic::Bin(BinOp::Arith(a, sign), w)),
            Some((None, _)) => Err(format!("`{op}` needs a signedness, e.g. `{}.s32`", parts[0])),
            _ => Err(bad()),
        }
    };
    let plain = |b: BinOp, allow_bool: bool| -> Result<Mnemonic, String> {
        match ty(1) {
            Some((_, w)) if parts.len() == 2 && (allow_bool || w != Width::B1) => Ok(Mnemonic::Bin(b, w)),
            _ => Err(bad()),
        }
    };
    match parts[0] {
        "const" if parts.len() == 2 => ty(1).map(|(_, w)| Mnemonic::Const(w)).ok_or_else(bad),
        "in" if parts.len() == 2 => match ty(1) {
            Some((_, w)) if matches!(w.bits(), 8 | 16 | 32) => Ok(Mnemonic::Input((w.bits() / 8) as u8)),
            _ => Err(bad()),
        },
        "add" => arith(ArithOp::Add),
        "sub" => arith(ArithOp::Sub),
        "mul" => arith(ArithOp::Mul),
        "div" => arith(ArithOp::Div),
        "rem" => arith(ArithOp::Rem),
        "shl" => plain(BinOp::Shl, false),
        "lshr" => plain(BinOp::LShr, false),
        "ashr" => plain(BinOp::AShr, false),
        "and" => plain(BinOp::And, true),
        "or" => plain(BinOp::Or, true),
        "xor" => plain(BinOp::Xor, true),
        "zext" | "sext" | "trunc" if parts.len() == 2 => {
            let c = match parts[0] {
                "zext" => CastOp::Zext,
                "sext" => CastOp::Sext,
                _ => CastOp::Trunc,
            };
            ty(1).map(|(_, w)| Mnemonic::Cast(c, w)).ok_or_else(bad)
        }
        "cmp" if parts.len() == 2 || parts.len() == 3 => {
            let pred = parse_pred(parts[1]).ok_or_else(bad)?;
            let w = if parts.len() == 3 { Some(ty(2).ok_or_else(bad)?.1) } else { None };
            Ok(Mnemonic::Cmp(pred, w))
        }
        "arr" => match (parts.get(1).copied(), parts.len()) {
            (Some("alloc"), 2) => Ok(Mnemonic::ArrAlloc(Width::W32)),
            (Some("alloc"), 3) => match ty(2) {
                Some((_, w)) if w != Width::B1 => Ok(Mnemonic::ArrAlloc(w)),
                _ => Err(bad()),
            },
            (Some("load"), 2) => Ok(Mnemonic::ArrLoad),
            (Some("store"), 2) => Ok(Mnemonic::ArrStore),
            _ => Err(bad()),
        },
        "call" if parts.len() == 1 => Ok(Mnemonic::Call),
        "icall" if parts.len() == 1 => Ok(Mnemonic::ICall),
        _ => Err(bad()),
    }
}

fn verr<T>(p: Pos, msg: impl Into<String>) -> Result<T, IrError> {
    Err(IrError::Validation { line: p.line, col: p.col, msg: msg.into() })
}

struct Signature {
    params: Vec<Width>,
    ret: Option<Width>,
}

/// Parses and validates IR text.
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let toks = lex(text)?;
    let raw = Parser { toks, at: 0 }.program()?;
    resolve(raw)
}

fn resolve(raw: RawProgram) -> Result<Program, IrError> {
    let input_len = raw.input_len.unwrap_or(Program::DEFAULT_INPUT_LEN);
    let mut func_ids: HashMap<&str, FuncId> = HashMap::new();
    for (i, f) in raw.funcs.iter().enumerate() {
        if func_ids.insert(f.name.as_str(), i as FuncId).is_some() {
            return verr(f.pos, format!("duplicate function `{}`", f.name));
        }
    }
    let sigs: Vec<Signature> = raw
        .funcs
        .iter()
        .map(|f| Signature { params: f.params.iter().map(|p| p.1).collect(), ret: f.ret })
        .collect();

    let (entry_name, entry_pos) = raw.entry.clone().unwrap_or(("main".into(), Pos { line: 1, col: 1 }));
    let Some(&entry) = func_ids.get(entry_name.as_str()) else {
        return verr(entry_pos, format!("entry function `{entry_name}` not found"));
    };
    if !sigs[entry as usize].params.is_empty() {
        return verr(raw.funcs[entry as usize].pos, "entry function must not take parameters");
    }

    let mut table = Vec::new();
    for (name, p) in &raw.table {
        let Some(&id) = func_ids.get(name.as_str()) else {
            return verr(*p, format!("table entry `{name}` is not a function"));
        };
        if let Some(&first) = table.first() {
            let (a, b): (&Signature, &Signature) = (&sigs[first as usize], &sigs[id as usize]);
            if a.params != b.params || a.ret != b.ret {
                return verr(*p, format!("table entry `{name}` has a different signature than `{}`", raw.funcs[first as usize].name));
            }
        }
        table.push(id);
    }

    let ctx = Ctx { func_ids: &func_ids, sigs: &sigs, table: &table, input_len };
    let functions = raw.funcs.iter().map(|f| ctx.function(f)).collect::<Result<Vec<_>, _>>()?;
    Ok(Program { functions, entry, table, input_len })
}

struct Ctx<'a> {
    func_ids: &'a HashMap<&'a str, FuncId>,
    sigs: &'a [Signature],
    table: &'a [FuncId],
    input_len: u32,
}

struct FnScope<'a> {
    regs: Vec<RegInfo>,
    reg_ids: HashMap<&'a str, RegId>,
    blocks: HashMap<&'a str, BlockId>,
}

impl FnScope<'_> {
    fn int_operand(&self, o: &RawOperand, w: Width) -> Result<Operand, IrError> {
        match o {
            RawOperand::Name(n, p) => {
                let Some(&r) = self.reg_ids.get(n.as_str()) else {
                    return verr(*p, format!("unknown register `{n}`"));
                };
                match self.regs[r as usize].ty {
                    Ty::Int(rw) if rw == w => Ok(Operand::Reg(r)),
                    Ty::Int(rw) => verr(*p, format!("width mismatch: `{n}` is {rw}-bit, expected {w}-bit")),
                    Ty::Array { .. } => verr(*p, format!("`{n}` is an array, expected a {w}-bit integer")),
                }
            }
            RawOperand::Int(v, p) => imm(*v, w, *p).map(Operand::Imm),
        }
    }

    fn int_reg(&self, o: &RawOperand) -> Result<(RegId, Width), IrError> {
        match o {
            RawOperand::Name(n, p) => {
                let Some(&r) = self.reg_ids.get(n.as_str()) else {
                    return verr(*p, format!("unknown register `{n}`"));
                };
                match self.regs[r as usize].ty {
                    Ty::Int(w) => Ok((r, w)),
                    Ty::Array { .. } => verr(*p, format!("`{n}` is an array, expected an integer register")),
                }
            }
            RawOperand::Int(_, p) => verr(*p, "expected a register"),
        }
    }

    fn array_reg(&self, o: &RawOperand) -> Result<(RegId, Width), IrError> {
        match o {
            RawOperand::Name(n, p) => match self.reg_ids.get(n.as_str()).map(|&r| (r, self.regs[r as usize].ty)) {
                Some((r, Ty::Array { elem, .. })) => Ok((r, elem)),
                Some(_) => verr(*p, format!("`{n}` is not an array")),
                None => verr(*p, format!("unknown register `{n}`")),
            },
            RawOperand::Int(_, p) => verr(*p, "expected an array register"),
        }
    }

    /// Array indices may be any integer width; immediates are 32-bit.
    fn index_operand(&self, o: &RawOperand) -> Result<Operand, IrError> {
        match o {
            RawOperand::Name(..) => self.int_reg(o).map(|(r, _)| Operand::Reg(r)),
            RawOperand::Int(v, p) => imm(*v, Width::W32, *p).map(Operand::Imm),
        }
    }
}

fn imm(v: i128, w: Width, p: Pos) -> Result<u64, IrError> {
    let lo = -(1i128 << (w.bits() - 1));
    let hi = (1i128 << w.bits()) - 1;
    if v < lo || v > hi {
        return verr(p, format!("immediate {v} does not fit in {w} bits"));
    }
    Ok((v as u64) & w.mask())
}

fn arity(m: &RawInstr, n: usize) -> Result<(), IrError> {
    if m.operands.len() != n {
        return verr(m.pos, format!("`{}` takes {n} operand(s), got {}", m.op, m.operands.len()));
    }
    Ok(())
}

impl Ctx<'_> {
    /// Result type of an instruction, determinable before operands are checked.
    fn result_ty(&self, m: &RawInstr, mn: Mnemonic, arrays: &HashMap<&str, Ty>) -> Result<Option<Ty>, IrError> {
        Ok(Some(match mn {
            Mnemonic::Const(w) | Mnemonic::Bin(_, w) | Mnemonic::Cast(_, w) => Ty::Int(w),
            Mnemonic::Input(n) => Ty::Int(Width::new(n as u32 * 8).unwrap()),
            Mnemonic::Cmp(..) => Ty::Int(Width::B1),
            Mnemonic::ArrAlloc(elem) => {
                arity(m, 1)?;
                let RawOperand::Int(len, p) = m.operands[0] else {
                    return verr(m.operands[0].pos(), "array size must be a constant");
                };
                if !(1..=65536).contains(&len) {
                    return verr(p, "array size must be in 1..=65536");
                }
                Ty::Array { elem, len: len as u32 }
            }
            Mnemonic::ArrLoad => {
                let Some(RawOperand::Name(a, p)) = m.operands.first() else {
                    return verr(m.pos, "`arr.load` needs an array operand");
                };
                match arrays.get(a.as_str()) {
                    Some(Ty::Array { elem, .. }) => Ty::Int(*elem),
                    _ => return verr(*p, format!("`{a}` is not an array")),
                }
            }
            Mnemonic::ArrStore => return Ok(None),
            Mnemonic::Call => {
                let Some(RawOperand::Name(f, p)) = m.operands.first() else {
                    return verr(m.pos, "`call` needs a function name");
                };
                let Some(&id) = self.func_ids.get(f.as_str()) else {
                    return verr(*p, format!("unknown function `{f}`"));
                };
                match self.sigs[id as usize].ret {
                    Some(w) => Ty::Int(w),
                    None => return Ok(None),
                }
            }
            Mnemonic::ICall => match self.table.first() {
                Some(&f) => match self.sigs[f as usize].ret {
                    Some(w) => Ty::Int(w),
                    None => return Ok(None),
                },
                None => return verr(m.pos, "`icall` used but the function table is empty"),
            },
        }))
    }

    fn function<'f>(&self, f: &'f RawFunc) -> Result<Function, IrError> {
        let mut blocks: HashMap<&'f str, BlockId> = HashMap::new();
        for (i, b) in f.blocks.iter().enumerate() {
            if blocks.insert(b.name.as_str(), i as BlockId).is_some() {
                return verr(b.pos, format!("duplicate block `{}` in `{}`", b.name, f.name));
            }
        }
        let Some(&entry) = blocks.get(f.entry.0.as_str()) else {
            return verr(f.entry.1, format!("entry block `{}` not found in `{}`", f.entry.0, f.name));
        };

        let mnemonics: Vec<Vec<Mnemonic>> = f
            .blocks
            .iter()
            .map(|b| {
                b.instrs
                    .iter()
                    .map(|i| decode_mnemonic(&i.op).or_else(|msg| verr(i.pos, msg)))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;

        // Register typing: params first, then array allocations, then the rest.
        let mut regs: Vec<RegInfo> = Vec::new();
        let mut reg_ids: HashMap<&'f str, RegId> = HashMap::new();
        for (name, w, p) in &f.params {
            if reg_ids.contains_key(name.as_str()) {
                return verr(*p, format!("duplicate parameter `{name}`"));
            }
            define(name, Ty::Int(*w), *p, &mut regs, &mut reg_ids)?;
        }
        let mut arrays: HashMap<&str, Ty> = HashMap::new();
        for (b, ms) in f.blocks.iter().zip(&mnemonics) {
            for (i, m) in b.instrs.iter().zip(ms) {
                if let (Mnemonic::ArrAlloc(_), Some((d, p))) = (m, &i.dest) {
                    let ty = self.result_ty(i, *m, &arrays)?.unwrap();
                    if let Some(prev) = arrays.get(d.as_str()) {
                        if *prev != ty {
                            return verr(*p, format!("array `{d}` reallocated with a different type"));
                        }
                    }
                    arrays.insert(d.as_str(), ty);
                }
            }
        }
        for (b, ms) in f.blocks.iter().zip(&mnemonics) {
            for (i, m) in b.instrs.iter().zip(ms) {
                let ty = self.result_ty(i, *m, &arrays)?;
                match (&i.dest, ty) {
                    (Some((d, p)), Some(ty)) => define(d, ty, *p, &mut regs, &mut reg_ids)?,
                    (Some((d, p)), None) => return verr(*p, format!("`{}` produces no value to assign to `{d}`", i.op)),
                    (None, Some(_)) if !matches!(m, Mnemonic::Call | Mnemonic::ICall) => {
                        return verr(i.pos, format!("`{}` needs a destination register", i.op));
                    }
                    _ => {}
                }
            }
        }
        let scope = FnScope { regs, reg_ids, blocks };

        let mut out_blocks = Vec::with_capacity(f.blocks.len());
        for (b, ms) in f.blocks.iter().zip(&mnemonics) {
            let mut instrs = Vec::with_capacity(b.instrs.len());
            for (i, m) in b.instrs.iter().zip(ms) {
                instrs.push(self.instr(&scope, i, *m)?);
            }
            let term = match &b.term {
                RawTerm::Jmp(t) => Terminator::Jmp(self.block_ref(&scope, t, b.term_pos)?),
                RawTerm::Br(c, t, e) => {
                    let (cond, w) = scope.int_reg(c)?;
                    if w != Width::B1 {
                        return verr(c.pos(), format!("branch condition must be a 1-bit register, found {w}-bit"));
                    }
                    Terminator::Br {
                        cond,
                        then_to: self.block_ref(&scope, t, b.term_pos)?,
                        else_to: self.block_ref(&scope, e, b.term_pos)?,
                    }
                }
                RawTerm::Ret(v) => match (v, f.ret) {
                    (None, None) => Terminator::Ret(None),
                    (Some(v), Some(w)) => Terminator::Ret(Some(scope.int_operand(v, w)?)),
                    (Some(v), None) => return verr(v.pos(), format!("`{}` declares no return value", f.name)),
                    (None, Some(w)) => return verr(b.term_pos, format!("`{}` must return a {w}-bit value", f.name)),
                },
            };
            out_blocks.push(Block { name: b.name.clone(), instrs, term, term_line: b.term_pos.line });
        }

        let func = Function {
            name: f.name.clone(),
            params: (0..f.params.len() as RegId).collect(),
            regs: scope.regs,
            blocks: out_blocks,
            entry,
            ret: f.ret,
        };
        check_definite_assignment(&func, f)?;
        Ok(func)
    }

    fn block_ref(&self, scope: &FnScope, name: &str, p: Pos) -> Result<BlockId, IrError> {
        scope.blocks.get(name).copied().ok_or(()).or_else(|_| verr(p, format!("unknown block `{name}`")))
    }

    fn instr(&self, s: &FnScope, i: &RawInstr, m: Mnemonic) -> Result<Instr, IrError> {
        let dest = i.dest.as_ref().map(|(d, _)| s.reg_ids[d.as_str()]);
        let line = i.pos.line;
        let ops = &i.operands;
        let (width, op) = match m {
            Mnemonic::Const(w) => {
                arity(i, 1)?;
                let RawOperand::Int(v, p) = ops[0] else {
                    return verr(ops[0].pos(), "`const` takes an immediate");
                };
                (w, Op::Const(imm(v, w, p)?))
            }
            Mnemonic::Input(n) => {
                arity(i, 1)?;
                let RawOperand::Int(off, p) = ops[0] else {
                    return verr(ops[0].pos(), "input offset must be a constant");
                };
                if off < 0 || off + n as i128 > self.input_len as i128 {
                    return verr(p, format!("input read at offset {off} of {n} byte(s) exceeds inputlen {}", self.input_len));
                }
                (Width::new(n as u32 * 8).unwrap(), Op::Input { offset: off as u32, bytes: n })
            }
            Mnemonic::Bin(op, w) => {
                arity(i, 2)?;
                (w, Op::Bin { op, lhs: s.int_operand(&ops[0], w)?, rhs: s.int_operand(&ops[1], w)? })
            }
            Mnemonic::Cast(op, to) => {
                arity(i, 1)?;
                let (src, from) = s.int_reg(&ops[0])?;
                let ok = match op {
                    CastOp::Zext | CastOp::Sext => to >= from,
                    CastOp::Trunc => to <= from,
                };
                if !ok {
                    return verr(i.pos, format!("cannot {op:?} from {from} to {to} bits"));
                }
                (to, Op::Cast { op, src, from })
            }
            Mnemonic::Cmp(pred, w) => {
                arity(i, 2)?;
                let w = match w {
                    Some(w) => w,
                    None => {
                        let reg = ops.iter().find(|o| matches!(o, RawOperand::Name(..)));
                        match reg {
                            Some(o) => s.int_reg(o)?.1,
                            None => return verr(i.pos, "cannot infer comparison width from two immediates; use e.g. `cmp.eq.u32`"),
                        }
                    }
                };
                (Width::B1, Op::Cmp { pred, lhs: s.int_operand(&ops[0], w)?, rhs: s.int_operand(&ops[1], w)?, width: w })
            }
            Mnemonic::ArrAlloc(elem) => {
                let Ty::Array { len, .. } = s.regs[dest.unwrap() as usize].ty else { unreachable!() };
                (elem, Op::ArrAlloc { len })
            }
            Mnemonic::ArrLoad => {
                arity(i, 2)?;
                let (arr, elem) = s.array_reg(&ops[0])?;
                (elem, Op::ArrLoad { arr, index: s.index_operand(&ops[1])? })
            }
            Mnemonic::ArrStore => {
                arity(i, 3)?;
                let (arr, elem) = s.array_reg(&ops[0])?;
                (elem, Op::ArrStore { arr, index: s.index_operand(&ops[1])?, value: s.int_operand(&ops[2], elem)? })
            }
            Mnemonic::Call => {
                let RawOperand::Name(fname, _) = &ops[0] else { unreachable!() };
                let callee = self.func_ids[fname.as_str()];
                let sig = &self.sigs[callee as usize];
                let args = self.args(s, i, &ops[1..], sig)?;
                (sig.ret.unwrap_or(Width::W32), Op::Call { callee, args })
            }
            Mnemonic::ICall => {
                if ops.is_empty() {
                    return verr(i.pos, "`icall` needs an index operand");
                }
                let sig = &self.sigs[self.table[0] as usize];
                let index = s.index_operand(&ops[0])?;
                let args = self.args(s, i, &ops[1..], sig)?;
                (sig.ret.unwrap_or(Width::W32), Op::ICall { index, args })
            }
        };
        Ok(Instr { dest, width, op, line })
    }

    fn args(&self, s: &FnScope, i: &RawInstr, ops: &[RawOperand], sig: &Signature) -> Result<Vec<Operand>, IrError> {
        if ops.len() != sig.params.len() {
            return verr(i.pos, format!("call passes {} argument(s), callee takes {}", ops.len(), sig.params.len()));
        }
        ops.iter().zip(&sig.params).map(|(o, w)| s.int_operand(o, *w)).collect()
    }
}

/// Registers must be assigned on every path before they are read.
fn check_definite_assignment(func: &Function, raw: &RawFunc) -> Result<(), IrError> {
    let n = func.blocks.len();
    let nregs = func.regs.len();
    let preds = func.predecessors();
    let mut entry_set = vec![false; nregs];
    for &p in &func.params {
        entry_set[p as usize] = true;
    }
    let gen = |b: &Block, mut set: Vec<bool>| {
        for i in &b.instrs {
            if let Some(d) = i.dest {
                set[d as usize] = true;
            }
        }
        set
    };
    let mut out: Vec<Vec<bool>> = vec![vec![true; nregs]; n];
    let order = reverse_postorder(func);
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &order {
            let input = in_set(b, func.entry, &entry_set, &preds, &out, nregs);
            let o = gen(func.block(b), input);
            if o != out[b as usize] {
                out[b as usize] = o;
                changed = true;
            }
        }
    }
    for &b in &order {
        let mut set = in_set(b, func.entry, &entry_set, &preds, &out, nregs);
        let block = func.block(b);
        for (idx, i) in block.instrs.iter().enumerate() {
            for r in i.uses() {
                if !set[r as usize] {
                    let p = raw.blocks[b as usize].instrs[idx].pos;
                    return verr(p, format!("register `{}` may be used before assignment", func.regs[r as usize].name));
                }
            }
            if let Some(d) = i.dest {
                set[d as usize] = true;
            }
        }
        let term_uses: Vec<RegId> = match &block.term {
            Terminator::Br { cond, .. } => vec![*cond],
            Terminator::Ret(Some(Operand::Reg(r))) => vec![*r],
            _ => vec![],
        };
        for r in term_uses {
            if !set[r as usize] {
                let p = raw.blocks[b as usize].term_pos;
                return verr(p, format!("register `{}` may be used before assignment", func.regs[r as usize].name));
            }
        }
    }
    Ok(())
}

fn in_set(b: BlockId, entry: BlockId, entry_set: &[bool], preds: &[Vec<BlockId>], out: &[Vec<bool>], nregs: usize) -> Vec<bool> {
    let mut acc = if b == entry { entry_set.to_vec() } else { vec![true; nregs] };
    for &p in &preds[b as usize] {
        for (a, o) in acc.iter_mut().zip(&out[p as usize]) {
            *a &= *o;
        }
    }
    if b != entry && preds[b as usize].is_empty() {
        // unreachable: nothing is known, but nothing is reported either
        return vec![true; nregs];
    }
    acc
}

/// Blocks reachable from the entry, in reverse postorder.
pub(crate) fn reverse_postorder(func: &Function) -> Vec<BlockId> {
    let n = func.blocks.len();
    let mut seen = vec![false; n];
    let mut post = Vec::with_capacity(n);
    let mut stack: Vec<(BlockId, usize)> = vec![(func.entry, 0)];
    seen[func.entry as usize] = true;
    while let Some((b, i)) = stack.pop() {
        let succs = func.block(b).term.successors();
        if i < succs.len() {
            stack.push((b, i + 1));
            let s = succs[i];
            if !seen[s as usize] {
                seen[s as usize] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(b);
        }
    }
    post.reverse();
    post
}

fn define<'a>(name: &'a str, ty: Ty, p: Pos, regs: &mut Vec<RegInfo>, reg_ids: &mut HashMap<&'a str, RegId>) -> Result<(), IrError> {
    match reg_ids.get(name) {
        Some(&r) if regs[r as usize].ty != ty => {
            verr(p, format!("register `{name}` redefined with a different type ({:?} vs {:?})", regs[r as usize].ty, ty))
        }
        Some(_) => Ok(()),
        None => {
            reg_ids.insert(name, regs.len() as RegId);
            regs.push(RegInfo { name: name.to_string(), ty });
            Ok(())
        }
    }
}
