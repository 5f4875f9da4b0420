//! Static removal of labels that a dominating constant comparison rules out.
//!
//! A label in block `L` is trimmed when
//! 1. `P = idom(L)` ends in a two-way branch, `L` is one of its arms and `P`
//!    is the only predecessor of `L`;
//! 2. the branch condition is a comparison of a register `x` against a
//!    constant, and every label operand is either unrelated to `x` or a copy
//!    of `x` (possibly through one cast) that is not redefined between the
//!    comparison and the label;
//! 3. interval reasoning shows the label condition cannot hold for any value
//!    the guard admits on that arm.
//!
//! Anything the analysis cannot decide keeps the label live.

use std::collections::BTreeMap;
use std::fmt;

use crate::dom::immediate_dominators;
use crate::ir::{ArithOp, BlockId, BlockRef, CastOp, CmpPred, Function, Op, Operand, Program, RegId, Terminator, Width};
use crate::labels::{BugLabel, Condition, LabelId, LabelSet, Status};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrimEvidence {
    pub label: LabelId,
    /// Immediate dominator of the label's block, ending in the guard branch.
    pub parent: BlockRef,
    /// The guard as it holds on the arm leading to the label, e.g. `i <u 100`.
    pub guard: String,
}

impl fmt::Display for TrimEvidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "idom=b{}:{} guard=[{}]", self.parent.func, self.parent.block, self.guard)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrimReport {
    pub total: usize,
    pub trimmed: Vec<TrimEvidence>,
}

impl TrimReport {
    pub fn evidence(&self, label: LabelId) -> Option<&TrimEvidence> {
        self.trimmed.iter().find(|e| e.label == label)
    }
}

/// Returns a copy of `labels` with provably dead labels marked trimmed.
/// Labels already trimmed stay trimmed.
pub fn trim_labels(program: &Program, labels: &LabelSet) -> (LabelSet, TrimReport) {
    let mut out = labels.clone();
    let mut report = TrimReport { total: labels.len(), trimmed: Vec::new() };
    let mut doms: BTreeMap<u32, BTreeMap<BlockId, BlockId>> = BTreeMap::new();
    let mut preds: BTreeMap<u32, Vec<Vec<BlockId>>> = BTreeMap::new();
    for label in labels.live() {
        let fid = label.site.func;
        let f = program.func(fid);
        let idom = doms.entry(fid).or_insert_with(|| immediate_dominators(f));
        let preds = preds.entry(fid).or_insert_with(|| f.predecessors());
        if let Some((parent, guard)) = check(f, idom, preds, label) {
            out.set_status(label.id, Status::Trimmed);
            report.trimmed.push(TrimEvidence { label: label.id, parent: BlockRef::new(fid, parent), guard });
        }
    }
    (out, report)
}

fn check(f: &Function, idom: &BTreeMap<BlockId, BlockId>, preds: &[Vec<BlockId>], label: &BugLabel) -> Option<(BlockId, String)> {
    let lb = label.site.block;
    let parent = *idom.get(&lb)?;
    if parent == lb || preds[lb as usize].iter().any(|&p| p != parent) {
        return None;
    }
    let pblock = f.block(parent);
    let Terminator::Br { cond, then_to, else_to } = pblock.term else {
        return None;
    };
    if then_to == else_to {
        return None;
    }
    let arm = if lb == then_to { true } else if lb == else_to { false } else { return None };

    // The comparison must be the last definition of `cond` in the parent.
    let cmp_at = pblock.instrs.iter().rposition(|i| i.dest == Some(cond))?;
    let Op::Cmp { pred, lhs, rhs, width } = pblock.instrs[cmp_at].op else {
        return None;
    };
    let (x, k, const_left) = match (lhs, rhs, constant(f, lhs), constant(f, rhs)) {
        (Operand::Reg(x), _, None, Some(k)) => (x, k, false),
        (_, Operand::Reg(x), Some(k), None) => (x, k, true),
        _ => return None,
    };
    let range = Range::from_guard(pred, width, k, const_left, arm);
    let guard = describe(f, x, pred, k, const_left, arm);

    // Walk from just after the comparison to the labeled instruction,
    // tracking which registers still hold `x` or a single cast of it.
    let mut known: BTreeMap<RegId, (Range, bool)> = BTreeMap::from([(x, (range, false))]);
    let path = pblock.instrs[cmp_at + 1..].iter().chain(&f.block(lb).instrs[..label.site.index as usize]);
    for instr in path {
        let Some(d) = instr.dest else { continue };
        let derived = match instr.op {
            Op::Cast { op, src, from } => match known.get(&src) {
                Some(&(r, false)) => Some((r.cast(op, from, instr.width), true)),
                _ => None,
            },
            _ => None,
        };
        match derived {
            Some(v) => known.insert(d, v),
            None => known.remove(&d),
        };
    }
    let operand = |o: Operand, w: Width| match o {
        Operand::Imm(v) => Range::exact(w, v),
        Operand::Reg(r) => known.get(&r).map(|(r, _)| *r).unwrap_or_else(|| Range::full(f.reg_width(r))),
    };
    let conflict = match label.condition {
        Condition::OutOfBounds { index, len } => {
            let w = index.reg().map(|r| f.reg_width(r)).unwrap_or(Width::W64);
            operand(index, w).is_empty() || operand(index, w).u.1 < len
        }
        Condition::OversizedShift { amount, width } => {
            let r = operand(amount, width);
            r.is_empty() || r.u.1 < width.bits() as u64
        }
        Condition::UnsignedOverflow { op, lhs, rhs, width } => {
            unsigned_safe(op, width, operand(lhs, width), operand(rhs, width))
        }
        Condition::SignedOverflow { op, lhs, rhs, width } => signed_safe(op, width, operand(lhs, width), operand(rhs, width)),
    };
    conflict.then_some((parent, guard))
}

/// Value of an operand that is a compile-time constant: an immediate, or a
/// register whose only definition in the function is a `const`.
fn constant(f: &Function, o: Operand) -> Option<u64> {
    match o {
        Operand::Imm(v) => Some(v),
        Operand::Reg(r) => {
            if f.params.contains(&r) {
                return None;
            }
            let mut defs = f.blocks.iter().flat_map(|b| &b.instrs).filter(|i| i.dest == Some(r));
            match (defs.next(), defs.next()) {
                (Some(i), None) => match i.op {
                    Op::Const(c) => Some(c),
                    _ => None,
                },
                _ => None,
            }
        }
    }
}

fn describe(f: &Function, x: RegId, pred: CmpPred, k: u64, const_left: bool, arm: bool) -> String {
    let sym = match pred {
        CmpPred::Eq => "==",
        CmpPred::Ne => "!=",
        CmpPred::Slt => "<s",
        CmpPred::Sle => "<=s",
        CmpPred::Ult => "<u",
        CmpPred::Ule => "<=u",
    };
    let name = &f.regs[x as usize].name;
    let body = if const_left { format!("{k:#x} {sym} {name}") } else { format!("{name} {sym} {k:#x}") };
    if arm {
        body
    } else {
        format!("!({body})")
    }
}

/// Values a register may hold, as an unsigned and a signed interval of the
/// same set (each may over-approximate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Range {
    w: Width,
    u: (u64, u64),
    s: (i64, i64),
}

impl Range {
    fn full(w: Width) -> Self {
        Range { w, u: (0, w.mask()), s: (w.signed_min(), w.signed_max()) }
    }

    fn exact(w: Width, v: u64) -> Self {
        Self::from_unsigned(w, v & w.mask(), v & w.mask())
    }

    fn empty(w: Width) -> Self {
        Range { w, u: (1, 0), s: (1, 0) }
    }

    fn is_empty(&self) -> bool {
        self.u.0 > self.u.1 || self.s.0 > self.s.1
    }

    fn from_unsigned(w: Width, lo: u64, hi: u64) -> Self {
        if lo > hi {
            return Self::empty(w);
        }
        let s = if hi < w.sign_bit() || lo >= w.sign_bit() {
            (w.to_signed(lo), w.to_signed(hi))
        } else {
            (w.signed_min(), w.signed_max())
        };
        Range { w, u: (lo, hi), s }
    }

    fn from_signed(w: Width, lo: i64, hi: i64) -> Self {
        if lo > hi {
            return Self::empty(w);
        }
        let u = if lo >= 0 || hi < 0 { (lo as u64 & w.mask(), hi as u64 & w.mask()) } else { (0, w.mask()) };
        Range { w, u, s: (lo, hi) }
    }

    /// Values of `x` on the given arm of `x pred k` (or `k pred x`).
    fn from_guard(pred: CmpPred, w: Width, k: u64, const_left: bool, arm: bool) -> Self {
        let (umax, smin, smax) = (w.mask(), w.signed_min(), w.signed_max());
        let k = k & umax;
        let ks = w.to_signed(k);
        // Normalize to a predicate on x that holds on this arm.
        use std::cmp::Ordering::*;
        let (pred, holds) = (pred, arm);
        let unsigned = |lo: Option<u64>, hi: Option<u64>| match (lo, hi) {
            (Some(lo), Some(hi)) => Self::from_unsigned(w, lo, hi),
            _ => Self::empty(w),
        };
        let signed = |lo: Option<i64>, hi: Option<i64>| match (lo, hi) {
            (Some(lo), Some(hi)) => Self::from_signed(w, lo, hi),
            _ => Self::empty(w),
        };
        // `rel` is how x must compare to k: Less/Equal/Greater with strictness.
        let rel: Option<(std::cmp::Ordering, bool)> = match (pred, const_left, holds) {
            (CmpPred::Eq, _, true) => Some((Equal, true)),
            (CmpPred::Ne, _, false) => Some((Equal, true)),
            (CmpPred::Eq | CmpPred::Ne, _, _) => None,
            // x < k / !(x < k) = x >= k
            (CmpPred::Ult | CmpPred::Slt, false, true) => Some((Less, true)),
            (CmpPred::Ult | CmpPred::Slt, false, false) => Some((Greater, false)),
            (CmpPred::Ule | CmpPred::Sle, false, true) => Some((Less, false)),
            (CmpPred::Ule | CmpPred::Sle, false, false) => Some((Greater, true)),
            // k < x / !(k < x) = x <= k
            (CmpPred::Ult | CmpPred::Slt, true, true) => Some((Greater, true)),
            (CmpPred::Ult | CmpPred::Slt, true, false) => Some((Less, false)),
            (CmpPred::Ule | CmpPred::Sle, true, true) => Some((Greater, false)),
            (CmpPred::Ule | CmpPred::Sle, true, false) => Some((Less, true)),
        };
        let Some((ord, strict)) = rel else {
            return Self::full(w);
        };
        let is_signed = matches!(pred, CmpPred::Slt | CmpPred::Sle);
        match (ord, strict, is_signed) {
            (Equal, _, _) => Self::exact(w, k),
            (Less, true, false) => unsigned(Some(0), k.checked_sub(1)),
            (Less, false, false) => unsigned(Some(0), Some(k)),
            (Greater, true, false) => unsigned(k.checked_add(1).filter(|v| *v <= umax), Some(umax)),
            (Greater, false, false) => unsigned(Some(k), Some(umax)),
            (Less, true, true) => signed(Some(smin), ks.checked_sub(1).filter(|v| *v >= smin)),
            (Less, false, true) => signed(Some(smin), Some(ks)),
            (Greater, true, true) => signed(ks.checked_add(1).filter(|v| *v <= smax), Some(smax)),
            (Greater, false, true) => signed(Some(ks), Some(smax)),
        }
    }

    fn cast(self, op: CastOp, from: Width, to: Width) -> Self {
        if self.is_empty() {
            return Self::empty(to);
        }
        debug_assert_eq!(self.w, from);
        match op {
            CastOp::Zext => Self::from_unsigned(to, self.u.0, self.u.1),
            CastOp::Sext => Self::from_signed(to, self.s.0, self.s.1),
            CastOp::Trunc => {
                if self.u.1 <= to.mask() {
                    Self::from_unsigned(to, self.u.0, self.u.1)
                } else if self.s.0 >= to.signed_min() && self.s.1 <= to.signed_max() {
                    Self::from_signed(to, self.s.0, self.s.1)
                } else {
                    Self::full(to)
                }
            }
        }
    }
}

/// True when `a op b` cannot leave `[0, 2^w - 1]` for any operands in range.
fn unsigned_safe(op: ArithOp, w: Width, a: Range, b: Range) -> bool {
    if a.is_empty() || b.is_empty() {
        return true;
    }
    let max = w.mask() as u128;
    match op {
        ArithOp::Add => a.u.1 as u128 + b.u.1 as u128 <= max,
        ArithOp::Sub => a.u.0 >= b.u.1,
        ArithOp::Mul => a.u.1 as u128 * b.u.1 as u128 <= max,
        ArithOp::Div | ArithOp::Rem => true,
    }
}

/// True when `a op b` cannot leave the signed range for any operands in range.
fn signed_safe(op: ArithOp, w: Width, a: Range, b: Range) -> bool {
    if a.is_empty() || b.is_empty() {
        return true;
    }
    let (min, max) = (w.signed_min() as i128, w.signed_max() as i128);
    let (a0, a1, b0, b1) = (a.s.0 as i128, a.s.1 as i128, b.s.0 as i128, b.s.1 as i128);
    let (lo, hi) = match op {
        ArithOp::Add => (a0 + b0, a1 + b1),
        ArithOp::Sub => (a0 - b1, a1 - b0),
        ArithOp::Mul => {
            let c = [a0 * b0, a0 * b1, a1 * b0, a1 * b1];
            (*c.iter().min().unwrap(), *c.iter().max().unwrap())
        }
        ArithOp::Div => return !(a0 == min && b0 <= -1 && -1 <= b1),
        ArithOp::Rem => return true,
    };
    min <= lo && hi <= max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::labels::place_labels;

    const LOOP: &str = "
        func main(entry=b0) {
        b0: i = const.u32 0
            a = arr.alloc.u32 16
            jmp b1
        b1: c = cmp.ult i, 16
            br c, b2, b3
        b2: v = arr.load a, i
            i = add.u32 i, 1
            jmp b1
        b3: ret
        }";

    fn trimmed(src: &str) -> Vec<LabelId> {
        let p = parse_program(src).unwrap();
        let (_, r) = trim_labels(&p, &place_labels(&p));
        r.trimmed.iter().map(|e| e.label).collect()
    }

    #[test]
    fn bounded_loop_trims_both_labels() {
        assert_eq!(trimmed(LOOP), vec![1, 2]);
        let p = parse_program(LOOP).unwrap();
        let (ls, r) = trim_labels(&p, &place_labels(&p));
        assert_eq!(ls.live_count(), 0);
        assert_eq!(r.total, 2);
        assert_eq!(r.trimmed[0].guard, "i <u 0x10");
    }

    #[test]
    fn inclusive_guard_keeps_the_oob_label() {
        assert_eq!(trimmed(&LOOP.replace("cmp.ult", "cmp.ule")), vec![2]);
    }

    #[test]
    fn redefinition_between_guard_and_site_blocks_trimming() {
        let src = LOOP.replace("v = arr.load a, i", "i = mul.u32 i, 3\n v = arr.load a, i");
        // the multiply itself (label 1) is bounded by the guard; the load is not
        assert_eq!(trimmed(&src), vec![1]);
    }

    #[test]
    fn guard_through_one_cast() {
        let src = "inputlen 1 func main(entry=b0) { b0: a = arr.alloc.u8 200 x = in.u8 0 c = cmp.ult x, 200 br c, b1, b2
                   b1: i = zext.u32 x  v = arr.load a, i  ret  b2: ret }";
        assert_eq!(trimmed(src), vec![1]);
    }

    #[test]
    fn else_arm_and_constant_on_the_left() {
        // !(100 <u x)  =>  x <= 100 ; x + 200 fits in 9 bits but not in u8
        let src = "inputlen 1 func main(entry=b0) { b0: x = in.u8 0 k = const.u8 100 c = cmp.ult k, x br c, b2, b1
                   b1: y = add.u8 x, 155  z = add.u8 x, 156  ret  b2: ret }";
        assert_eq!(trimmed(src), vec![1]);
    }

    #[test]
    fn shared_successor_is_not_trimmed() {
        let src = "inputlen 1 func main(entry=b0) { b0: x = in.u8 0 c = cmp.ult x, 4 br c, b1, b2
                   b2: jmp b1  b1: y = shl.8 1, x  ret }";
        assert!(trimmed(src).is_empty());
    }

    #[test]
    fn range_from_signed_guard() {
        let r = Range::from_guard(CmpPred::Slt, Width::W8, 0, false, true);
        assert_eq!(r.s, (-128, -1));
        assert_eq!(r.u, (0x80, 0xFF));
        let r = Range::from_guard(CmpPred::Ult, Width::W8, 0, false, true);
        assert!(r.is_empty());
    }
}
