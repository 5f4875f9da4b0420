//! Symbolic bit-vector expressions over input bytes.
//!
//! Nodes are hash-consed only by pointer: building the same term twice gives
//! two nodes. Widths go up to 128 bits so that overflow conditions of 64-bit
//! operations can be stated exactly at twice the width.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::ir::{ArithOp, BinOp, CastOp, CmpPred, Signedness};

pub type ExprRef = Arc<Expr>;

#[derive(Debug)]
pub struct Expr {
    pub width: u32,
    pub kind: Kind,
    /// Input offsets this expression depends on.
    pub support: Arc<BTreeSet<u32>>,
}

#[derive(Debug)]
pub enum Kind {
    Const(u128),
    /// One input byte (width 8).
    Byte(u32),
    /// Little-endian concatenation: `parts[0]` holds the low bits.
    Concat(Vec<ExprRef>),
    Bin(BinOp, ExprRef, ExprRef),
    /// Cast to `Expr::width` from the operand's width.
    Cast(CastOp, ExprRef),
    /// Width-1 comparison of two equal-width operands.
    Cmp(CmpPred, ExprRef, ExprRef),
    /// Bitwise complement.
    Not(ExprRef),
}

pub fn mask(w: u32) -> u128 {
    if w >= 128 {
        u128::MAX
    } else {
        (1u128 << w) - 1
    }
}

pub fn to_signed(w: u32, v: u128) -> i128 {
    let v = v & mask(w);
    if w >= 128 || v >> (w - 1) == 0 {
        v as i128
    } else {
        (v | !mask(w)) as i128
    }
}

/// IR semantics at any width: wrapping, division by zero yields 0, shift
/// amounts masked to `w - 1`.
pub fn eval_bin(op: BinOp, w: u32, a: u128, b: u128) -> u128 {
    let m = mask(w);
    let (a, b) = (a & m, b & m);
    let sh = (b & (w as u128 - 1)) as u32;
    let r = match op {
        BinOp::Arith(ArithOp::Add, _) => a.wrapping_add(b),
        BinOp::Arith(ArithOp::Sub, _) => a.wrapping_sub(b),
        BinOp::Arith(ArithOp::Mul, _) => a.wrapping_mul(b),
        BinOp::Arith(_, _) if b == 0 => 0,
        BinOp::Arith(ArithOp::Div, Signedness::Unsigned) => a / b,
        BinOp::Arith(ArithOp::Rem, Signedness::Unsigned) => a % b,
        BinOp::Arith(ArithOp::Div, Signedness::Signed) => to_signed(w, a).wrapping_div(to_signed(w, b)) as u128,
        BinOp::Arith(ArithOp::Rem, Signedness::Signed) => to_signed(w, a).wrapping_rem(to_signed(w, b)) as u128,
        BinOp::Shl => a << sh,
        BinOp::LShr => a >> sh,
        BinOp::AShr => (to_signed(w, a) >> sh) as u128,
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
    };
    r & m
}

pub fn eval_cast(op: CastOp, from: u32, to: u32, a: u128) -> u128 {
    match op {
        CastOp::Zext => a & mask(from),
        CastOp::Sext => to_signed(from, a) as u128 & mask(to),
        CastOp::Trunc => a & mask(to),
    }
}

pub fn eval_cmp(pred: CmpPred, w: u32, a: u128, b: u128) -> bool {
    let (a, b) = (a & mask(w), b & mask(w));
    match pred {
        CmpPred::Eq => a == b,
        CmpPred::Ne => a != b,
        CmpPred::Ult => a < b,
        CmpPred::Ule => a <= b,
        CmpPred::Slt => to_signed(w, a) < to_signed(w, b),
        CmpPred::Sle => to_signed(w, a) <= to_signed(w, b),
    }
}

/// Add/sub/mul do not depend on signedness; keep one spelling.
fn normalize(op: BinOp) -> BinOp {
    match op {
        BinOp::Arith(a @ (ArithOp::Add | ArithOp::Sub | ArithOp::Mul), _) => BinOp::Arith(a, Signedness::Unsigned),
        other => other,
    }
}

fn union(a: &Arc<BTreeSet<u32>>, b: &Arc<BTreeSet<u32>>) -> Arc<BTreeSet<u32>> {
    if b.is_subset(a) {
        a.clone()
    } else if a.is_subset(b) {
        b.clone()
    } else {
        Arc::new(a.union(b).copied().collect())
    }
}

fn node(width: u32, kind: Kind, support: Arc<BTreeSet<u32>>) -> ExprRef {
    Arc::new(Expr { width, kind, support })
}

impl Expr {
    pub fn as_const(&self) -> Option<u128> {
        match self.kind {
            Kind::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_const(&self) -> bool {
        self.as_const().is_some()
    }

    /// `(offset, bytes)` when this is a byte or a little-endian run of
    /// consecutive bytes.
    pub fn byte_run(&self) -> Option<(u32, u32)> {
        match &self.kind {
            Kind::Byte(o) => Some((*o, 1)),
            Kind::Concat(parts) => {
                let first = match parts.first()?.kind {
                    Kind::Byte(o) => o,
                    _ => return None,
                };
                for (k, p) in parts.iter().enumerate() {
                    match p.kind {
                        Kind::Byte(o) if o == first + k as u32 => {}
                        _ => return None,
                    }
                }
                Some((first, parts.len() as u32))
            }
            _ => None,
        }
    }

    /// Concrete value under `bytes` (missing bytes read as 0). Shared
    /// subterms are evaluated once.
    pub fn eval(self: &ExprRef, bytes: &[u8]) -> u128 {
        let tape = Tape::new(std::slice::from_ref(self));
        let mut vals = Vec::new();
        tape.eval(bytes, &mut vals);
        vals[tape.roots[0]]
    }

    /// Number of distinct nodes.
    pub fn dag_size(self: &ExprRef) -> usize {
        Tape::new(std::slice::from_ref(self)).len()
    }
}

pub fn konst(w: u32, v: u128) -> ExprRef {
    node(w, Kind::Const(v & mask(w)), Arc::new(BTreeSet::new()))
}

pub fn bool_const(v: bool) -> ExprRef {
    konst(1, v as u128)
}

pub fn byte(offset: u32) -> ExprRef {
    node(8, Kind::Byte(offset), Arc::new(BTreeSet::from([offset])))
}

/// Little-endian read of `n` consecutive input bytes.
pub fn input(offset: u32, n: u32) -> ExprRef {
    if n == 1 {
        return byte(offset);
    }
    concat((0..n).map(|k| byte(offset + k)).collect())
}

pub fn concat(parts: Vec<ExprRef>) -> ExprRef {
    assert!(!parts.is_empty());
    if parts.len() == 1 {
        return parts.into_iter().next().unwrap();
    }
    let width = parts.iter().map(|p| p.width).sum();
    if parts.iter().all(|p| p.is_const()) {
        let mut v = 0u128;
        for p in parts.iter().rev() {
            v = (v << p.width) | p.as_const().unwrap();
        }
        return konst(width, v);
    }
    let support = parts.iter().skip(1).fold(parts[0].support.clone(), |s, p| union(&s, &p.support));
    node(width, Kind::Concat(parts), support)
}

pub fn bin(op: BinOp, a: ExprRef, b: ExprRef) -> ExprRef {
    assert_eq!(a.width, b.width, "operand widths differ");
    let w = a.width;
    let op = normalize(op);
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => return konst(w, eval_bin(op, w, x, y)),
        (_, Some(0)) if matches!(op, BinOp::Arith(ArithOp::Add | ArithOp::Sub, _) | BinOp::Or | BinOp::Xor) => return a,
        (_, Some(0)) if op.is_shift() => return a,
        (Some(0), _) if matches!(op, BinOp::Arith(ArithOp::Add, _) | BinOp::Or | BinOp::Xor) => return b,
        (_, Some(1)) if matches!(op, BinOp::Arith(ArithOp::Mul, _)) => return a,
        (Some(1), _) if matches!(op, BinOp::Arith(ArithOp::Mul, _)) => return b,
        (_, Some(0)) | (Some(0), _) if matches!(op, BinOp::Arith(ArithOp::Mul, _) | BinOp::And) => return konst(w, 0),
        (_, Some(m)) if op == BinOp::And && m == mask(w) => return a,
        (Some(m), _) if op == BinOp::And && m == mask(w) => return b,
        _ => {}
    }
    let support = union(&a.support, &b.support);
    node(w, Kind::Bin(op, a, b), support)
}

pub fn cast(op: CastOp, a: ExprRef, to: u32) -> ExprRef {
    let from = a.width;
    if from == to {
        return a;
    }
    if let Some(c) = a.as_const() {
        return konst(to, eval_cast(op, from, to, c));
    }
    match (op, &a.kind) {
        (CastOp::Zext, Kind::Cast(CastOp::Zext, inner)) => return cast(CastOp::Zext, inner.clone(), to),
        (CastOp::Sext, Kind::Cast(CastOp::Sext, inner)) => return cast(CastOp::Sext, inner.clone(), to),
        (CastOp::Trunc, Kind::Cast(CastOp::Zext | CastOp::Sext, inner)) if to == inner.width => return inner.clone(),
        (CastOp::Trunc, Kind::Cast(CastOp::Zext, inner)) if to > inner.width => return cast(CastOp::Zext, inner.clone(), to),
        (CastOp::Trunc, Kind::Cast(CastOp::Trunc, inner)) => return cast(CastOp::Trunc, inner.clone(), to),
        (CastOp::Trunc, Kind::Concat(parts)) => {
            let mut keep = Vec::new();
            let mut bits = 0;
            for p in parts {
                if bits + p.width > to {
                    break;
                }
                bits += p.width;
                keep.push(p.clone());
            }
            if bits == to {
                return concat(keep);
            }
        }
        _ => {}
    }
    let support = a.support.clone();
    node(to, Kind::Cast(op, a), support)
}

pub fn zext(a: ExprRef, to: u32) -> ExprRef {
    cast(CastOp::Zext, a, to)
}

pub fn sext(a: ExprRef, to: u32) -> ExprRef {
    cast(CastOp::Sext, a, to)
}

pub fn cmp(pred: CmpPred, a: ExprRef, b: ExprRef) -> ExprRef {
    assert_eq!(a.width, b.width, "operand widths differ");
    if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
        return bool_const(eval_cmp(pred, a.width, x, y));
    }
    let support = union(&a.support, &b.support);
    node(1, Kind::Cmp(pred, a, b), support)
}

/// Bitwise complement; on booleans, comparisons are negated in place.
pub fn not(a: ExprRef) -> ExprRef {
    if let Some(c) = a.as_const() {
        return konst(a.width, !c);
    }
    match &a.kind {
        Kind::Not(inner) => return inner.clone(),
        Kind::Cmp(pred, x, y) => {
            let (x, y) = (x.clone(), y.clone());
            return match pred {
                CmpPred::Eq => cmp(CmpPred::Ne, x, y),
                CmpPred::Ne => cmp(CmpPred::Eq, x, y),
                CmpPred::Ult => cmp(CmpPred::Ule, y, x),
                CmpPred::Ule => cmp(CmpPred::Ult, y, x),
                CmpPred::Slt => cmp(CmpPred::Sle, y, x),
                CmpPred::Sle => cmp(CmpPred::Slt, y, x),
            };
        }
        _ => {}
    }
    let support = a.support.clone();
    node(a.width, Kind::Not(a), support)
}

/// `a` as a boolean: its low bit, the branch convention of the interpreter.
pub fn truth(a: ExprRef) -> ExprRef {
    if a.width == 1 {
        a
    } else {
        cast(CastOp::Trunc, a, 1)
    }
}

pub fn and(a: ExprRef, b: ExprRef) -> ExprRef {
    bin(BinOp::And, a, b)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Const(c) => write!(f, "{c:#x}:{}", self.width),
            Kind::Byte(o) => write!(f, "in[{o}]"),
            Kind::Concat(parts) => {
                if let Some((o, n)) = self.byte_run() {
                    return write!(f, "in[{o}..{}]", o + n);
                }
                write!(f, "(concat")?;
                for p in parts {
                    write!(f, " {p}")?;
                }
                write!(f, ")")
            }
            Kind::Bin(op, a, b) => write!(f, "({op:?} {a} {b})"),
            Kind::Cast(op, a) => write!(f, "({op:?}{} {a})", self.width),
            Kind::Cmp(p, a, b) => write!(f, "({p:?} {a} {b})"),
            Kind::Not(a) => write!(f, "(not {a})"),
        }
    }
}

/// A DAG flattened into topological order for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Tape {
    pub nodes: Vec<ExprRef>,
    ops: Vec<TOp>,
    pub roots: Vec<usize>,
    index: HashMap<*const Expr, usize>,
}

#[derive(Debug, Clone)]
enum TOp {
    Const(u128),
    Byte(u32),
    Concat(Vec<usize>),
    Bin(BinOp, usize, usize),
    Cast(CastOp, usize),
    Cmp(CmpPred, usize, usize),
    Not(usize),
}

impl Tape {
    pub fn new(roots: &[ExprRef]) -> Self {
        let mut t = Tape { nodes: Vec::new(), ops: Vec::new(), roots: Vec::new(), index: HashMap::new() };
        for r in roots {
            let i = t.add(r);
            t.roots.push(i);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, e: &ExprRef) -> Option<usize> {
        self.index.get(&Arc::as_ptr(e)).copied()
    }

    fn add(&mut self, root: &ExprRef) -> usize {
        if let Some(i) = self.index_of(root) {
            return i;
        }
        // explicit post-order to survive deep chains
        let mut stack: Vec<(ExprRef, bool)> = vec![(root.clone(), false)];
        while let Some((e, expanded)) = stack.pop() {
            if self.index_of(&e).is_some() {
                continue;
            }
            let children: Vec<&ExprRef> = match &e.kind {
                Kind::Const(_) | Kind::Byte(_) => vec![],
                Kind::Concat(ps) => ps.iter().collect(),
                Kind::Bin(_, a, b) | Kind::Cmp(_, a, b) => vec![a, b],
                Kind::Cast(_, a) | Kind::Not(a) => vec![a],
            };
            let pending: Vec<ExprRef> = children.iter().filter(|c| self.index_of(c).is_none()).map(|c| (*c).clone()).collect();
            if !expanded && !pending.is_empty() {
                stack.push((e.clone(), true));
                for c in pending {
                    stack.push((c, false));
                }
                continue;
            }
            let ix = |c: &ExprRef| self.index_of(c).unwrap();
            let op = match &e.kind {
                Kind::Const(c) => TOp::Const(*c),
                Kind::Byte(o) => TOp::Byte(*o),
                Kind::Concat(ps) => TOp::Concat(ps.iter().map(ix).collect()),
                Kind::Bin(op, a, b) => TOp::Bin(*op, ix(a), ix(b)),
                Kind::Cmp(p, a, b) => TOp::Cmp(*p, ix(a), ix(b)),
                Kind::Cast(op, a) => TOp::Cast(*op, ix(a)),
                Kind::Not(a) => TOp::Not(ix(a)),
            };
            self.index.insert(Arc::as_ptr(&e), self.nodes.len());
            self.nodes.push(e);
            self.ops.push(op);
        }
        self.index_of(root).unwrap()
    }

    /// Evaluates every node; `vals[i]` is the value of `nodes[i]`.
    pub fn eval(&self, bytes: &[u8], vals: &mut Vec<u128>) {
        vals.clear();
        vals.reserve(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let w = self.nodes[i].width;
            let v = match op {
                TOp::Const(c) => *c,
                TOp::Byte(o) => bytes.get(*o as usize).copied().unwrap_or(0) as u128,
                TOp::Concat(ps) => {
                    let mut v = 0u128;
                    for &p in ps.iter().rev() {
                        v = (v << self.nodes[p].width) | vals[p];
                    }
                    v
                }
                TOp::Bin(op, a, b) => eval_bin(*op, w, vals[*a], vals[*b]),
                TOp::Cast(op, a) => eval_cast(*op, self.nodes[*a].width, w, vals[*a]),
                TOp::Cmp(p, a, b) => eval_cmp(*p, self.nodes[*a].width, vals[*a], vals[*b]) as u128,
                TOp::Not(a) => !vals[*a] & mask(w),
            };
            vals.push(v);
        }
    }

    /// Whether every root evaluates to 1.
    pub fn all_true(&self, bytes: &[u8], vals: &mut Vec<u128>) -> bool {
        self.eval(bytes, vals);
        self.roots.iter().all(|&r| vals[r] & 1 == 1)
    }
}
