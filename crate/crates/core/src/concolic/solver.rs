//! Decision procedure for conjunctions of boolean [`Expr`]s over input bytes.
//!
//! Layers, in order: the hint (the seed) as-is; interval propagation, which
//! can prove UNSAT; repair by inverting operations along the failing
//! constraint; exhaustive enumeration when the support is tiny (complete);
//! randomized local search. Whatever is still open is UNKNOWN. Every SAT
//! answer is re-checked by evaluation before it is returned.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::expr::{eval_cmp, mask, ExprRef, Kind, Tape};
use crate::ir::{ArithOp, BinOp, CastOp, CmpPred};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SolverConfig {
    /// Supports of at most this many bytes are enumerated exhaustively.
    pub exhaustive_byte_cap: usize,
    /// Candidate assignments tried by local search.
    pub search_budget: u32,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { exhaustive_byte_cap: 2, search_budget: 4000, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    /// Values for the support bytes.
    Sat(BTreeMap<u32, u8>),
    Unsat,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Input offsets the constraints mention.
    pub support: BTreeSet<u32>,
}

impl SolveResult {
    pub fn is_sat(&self) -> bool {
        matches!(self.status, SolveStatus::Sat(_))
    }

    pub fn witness(&self) -> Option<&BTreeMap<u32, u8>> {
        match &self.status {
            SolveStatus::Sat(w) => Some(w),
            _ => None,
        }
    }

    /// `base` with the witness bytes written over it.
    pub fn apply(&self, base: &[u8]) -> Option<Vec<u8>> {
        let w = self.witness()?;
        let mut out = base.to_vec();
        for (&o, &v) in w {
            if (o as usize) < out.len() {
                out[o as usize] = v;
            }
        }
        Some(out)
    }
}

/// Splits top-level boolean conjunctions and drops constant-true terms.
/// Returns `None` if some term is constant false.
fn flatten(constraints: &[ExprRef]) -> Option<Vec<ExprRef>> {
    let mut out = Vec::new();
    let mut stack: Vec<ExprRef> = constraints.iter().rev().cloned().collect();
    while let Some(c) = stack.pop() {
        match &c.kind {
            Kind::Const(v) => {
                if v & 1 == 0 {
                    return None;
                }
            }
            Kind::Bin(BinOp::And, a, b) if c.width == 1 => {
                stack.push(b.clone());
                stack.push(a.clone());
            }
            _ => out.push(c),
        }
    }
    Some(out)
}

pub fn solve(constraints: &[ExprRef], hint: &[u8], cfg: &SolverConfig) -> SolveResult {
    let support: BTreeSet<u32> = constraints.iter().flat_map(|c| c.support.iter().copied()).collect();
    let done = |status| SolveResult { status, support: support.clone() };
    let Some(roots) = flatten(constraints) else {
        return done(SolveStatus::Unsat);
    };
    let len = support.iter().next_back().map_or(0, |&m| m as usize + 1).max(hint.len());
    let mut bytes = hint.to_vec();
    bytes.resize(len, 0);
    let tape = Tape::new(&roots);
    let mut s = Search { tape: &tape, vals: Vec::new(), bytes, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let witness = |s: &Search| SolveStatus::Sat(support.iter().map(|&o| (o, s.bytes[o as usize])).collect());

    if s.check() {
        return done(witness(&s));
    }
    let Some(ranges) = propagate(&tape, len) else {
        return done(SolveStatus::Unsat);
    };
    // start from the hint projected into the proven byte ranges
    for &o in &support {
        let (lo, hi) = ranges[o as usize];
        s.bytes[o as usize] = s.bytes[o as usize].clamp(lo, hi);
    }
    if s.repair() {
        return done(witness(&s));
    }
    if support.len() <= cfg.exhaustive_byte_cap {
        return done(match s.exhaustive(&support.iter().copied().collect::<Vec<_>>(), &ranges) {
            true => witness(&s),
            false => SolveStatus::Unsat,
        });
    }
    if s.local_search(&support.iter().copied().collect::<Vec<_>>(), &ranges, cfg.search_budget) {
        return done(witness(&s));
    }
    done(SolveStatus::Unknown)
}

// ---------------------------------------------------------------------------
// interval propagation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Iv {
    lo: u128,
    hi: u128,
}

impl Iv {
    fn full(w: u32) -> Iv {
        Iv { lo: 0, hi: mask(w) }
    }

    fn point(v: u128) -> Iv {
        Iv { lo: v, hi: v }
    }

    fn meet(self, o: Iv) -> Option<Iv> {
        let r = Iv { lo: self.lo.max(o.lo), hi: self.hi.min(o.hi) };
        (r.lo <= r.hi).then_some(r)
    }
}

fn forward(e: &ExprRef, kids: &[Iv]) -> Iv {
    let w = e.width;
    let m = mask(w);
    let full = Iv::full(w);
    match &e.kind {
        Kind::Const(c) => Iv::point(*c),
        Kind::Byte(_) => full,
        Kind::Concat(parts) => {
            let (mut lo, mut hi, mut sh) = (0u128, 0u128, 0u32);
            for (p, iv) in parts.iter().zip(kids) {
                lo |= iv.lo << sh;
                hi |= iv.hi << sh;
                sh += p.width;
            }
            Iv { lo, hi }
        }
        Kind::Bin(op, ..) => {
            let (a, b) = (kids[0], kids[1]);
            match op {
                BinOp::Arith(ArithOp::Add, _) => match (a.lo.checked_add(b.lo), a.hi.checked_add(b.hi)) {
                    (Some(lo), Some(hi)) if hi <= m => Iv { lo, hi },
                    (Some(lo), Some(hi)) if lo > m && w < 128 => Iv { lo: lo - (m + 1), hi: hi - (m + 1) },
                    _ => full,
                },
                BinOp::Arith(ArithOp::Sub, _) => {
                    if a.lo >= b.hi {
                        Iv { lo: a.lo - b.hi, hi: a.hi - b.lo }
                    } else if a.hi < b.lo {
                        Iv { lo: (a.lo.wrapping_sub(b.hi)) & m, hi: (a.hi.wrapping_sub(b.lo)) & m }
                    } else {
                        full
                    }
                }
                BinOp::Arith(ArithOp::Mul, _) => match a.hi.checked_mul(b.hi) {
                    Some(hi) if hi <= m => Iv { lo: a.lo * b.lo, hi },
                    _ => full,
                },
                BinOp::Arith(ArithOp::Div, crate::ir::Signedness::Unsigned) => {
                    match a.hi.checked_div(b.lo) {
                        Some(hi) => Iv { lo: a.lo / b.hi, hi },
                        None => Iv { lo: 0, hi: a.hi },
                    }
                }
                BinOp::Arith(ArithOp::Rem, crate::ir::Signedness::Unsigned) => {
                    Iv { lo: 0, hi: if b.lo == 0 { a.hi } else { a.hi.min(b.hi - 1) } }
                }
                BinOp::And => Iv { lo: 0, hi: a.hi.min(b.hi) },
                BinOp::Or | BinOp::Xor => {
                    let top = a.hi | b.hi;
                    let hi = if top == 0 { 0 } else { mask(128 - top.leading_zeros()) };
                    let lo = if *op == BinOp::Or { a.lo.max(b.lo) } else { 0 };
                    Iv { lo, hi: hi.min(m) }
                }
                BinOp::LShr if b.lo == b.hi => {
                    let sh = (b.lo & (w as u128 - 1)) as u32;
                    Iv { lo: a.lo >> sh, hi: a.hi >> sh }
                }
                BinOp::LShr => Iv { lo: 0, hi: a.hi },
                BinOp::Shl if b.lo == b.hi => {
                    let sh = (b.lo & (w as u128 - 1)) as u32;
                    if sh == 0 || a.hi <= m >> sh {
                        Iv { lo: a.lo << sh, hi: a.hi << sh }
                    } else {
                        full
                    }
                }
                _ => full,
            }
        }
        Kind::Cast(op, a) => {
            let k = kids[0];
            let from = a.width;
            match op {
                CastOp::Zext => k,
                CastOp::Sext => {
                    let sb = 1u128 << (from - 1);
                    if k.hi < sb {
                        k
                    } else if k.lo >= sb {
                        let add = m ^ mask(from);
                        Iv { lo: k.lo + add, hi: k.hi + add }
                    } else {
                        full
                    }
                }
                CastOp::Trunc => {
                    if k.hi <= m {
                        k
                    } else if w < 128 && k.lo >> w == k.hi >> w {
                        Iv { lo: k.lo & m, hi: k.hi & m }
                    } else {
                        full
                    }
                }
            }
        }
        Kind::Cmp(p, a, _) => {
            let (x, y) = (kids[0], kids[1]);
            let w = a.width;
            let (x, y, p) = match p {
                CmpPred::Slt | CmpPred::Sle => {
                    // compare in the sign-flipped space when neither side wraps around it
                    let sb = 1u128 << (w - 1);
                    let flip = |i: Iv| {
                        if i.hi < sb || i.lo >= sb {
                            Some(Iv { lo: i.lo ^ sb, hi: i.hi ^ sb })
                        } else {
                            None
                        }
                    };
                    match (flip(x), flip(y)) {
                        (Some(x), Some(y)) => (x, y, if *p == CmpPred::Slt { CmpPred::Ult } else { CmpPred::Ule }),
                        _ => return Iv { lo: 0, hi: 1 },
                    }
                }
                _ => (x, y, *p),
            };
            let decided = match p {
                CmpPred::Ult if x.hi < y.lo => Some(true),
                CmpPred::Ult if x.lo >= y.hi => Some(false),
                CmpPred::Ule if x.hi <= y.lo => Some(true),
                CmpPred::Ule if x.lo > y.hi => Some(false),
                CmpPred::Eq | CmpPred::Ne if x.lo == x.hi && y.lo == y.hi && x.lo == y.lo => Some(p == CmpPred::Eq),
                CmpPred::Eq | CmpPred::Ne if x.hi < y.lo || y.hi < x.lo => Some(p == CmpPred::Ne),
                _ => None,
            };
            match decided {
                Some(v) => Iv::point(v as u128),
                None => Iv { lo: 0, hi: 1 },
            }
        }
        Kind::Not(_) => Iv { lo: m - kids[0].hi, hi: m - kids[0].lo },
    }
}

fn children(e: &ExprRef) -> Vec<&ExprRef> {
    match &e.kind {
        Kind::Const(_) | Kind::Byte(_) => vec![],
        Kind::Concat(ps) => ps.iter().collect(),
        Kind::Bin(_, a, b) | Kind::Cmp(_, a, b) => vec![a, b],
        Kind::Cast(_, a) | Kind::Not(a) => vec![a],
    }
}

/// Range `x` must lie in for `x pred y` (if `left`) or `y pred x` to hold,
/// given `y`'s range. Signed predicates give no information.
fn side_range(p: CmpPred, w: u32, y: Iv, left: bool) -> Option<Option<Iv>> {
    let m = mask(w);
    let r = match (p, left) {
        (CmpPred::Eq, _) => Some(y),
        (CmpPred::Ult, true) => (y.hi > 0).then(|| Iv { lo: 0, hi: y.hi - 1 }),
        (CmpPred::Ult, false) => (y.lo < m).then(|| Iv { lo: y.lo + 1, hi: m }),
        (CmpPred::Ule, true) => Some(Iv { lo: 0, hi: y.hi }),
        (CmpPred::Ule, false) => Some(Iv { lo: y.lo, hi: m }),
        _ => return None,
    };
    Some(r)
}

/// Interval propagation to a fixpoint (bounded). Returns per-byte ranges, or
/// `None` when some constraint cannot hold.
fn propagate(tape: &Tape, len: usize) -> Option<Vec<(u8, u8)>> {
    let mut bytes: Vec<Iv> = vec![Iv { lo: 0, hi: 255 }; len];
    let mut runs: HashMap<(u32, u32), Iv> = HashMap::new();
    for _round in 0..8 {
        // forward
        let mut ivs: Vec<Iv> = Vec::with_capacity(tape.len());
        for e in &tape.nodes {
            let kids: Vec<Iv> = children(e).iter().map(|c| ivs[tape.index_of(c).unwrap()]).collect();
            let mut iv = match e.kind {
                Kind::Byte(o) => bytes[o as usize],
                _ => forward(e, &kids),
            };
            if let Some(run) = e.byte_run().and_then(|k| runs.get(&k)) {
                iv = iv.meet(*run)?;
            }
            ivs.push(iv);
        }
        // backward from the roots, which must all be 1
        let mut changed = false;
        let mut work: Vec<(usize, Iv)> = tape.roots.iter().map(|&r| (r, Iv::point(1))).collect();
        while let Some((i, want)) = work.pop() {
            let e = &tape.nodes[i];
            let now = ivs[i].meet(want)?;
            if now == ivs[i] && !matches!(e.kind, Kind::Cmp(..) | Kind::Bin(BinOp::And, ..)) {
                continue;
            }
            ivs[i] = now;
            let idx = |c: &ExprRef| tape.index_of(c).unwrap();
            if let Some((o, n)) = e.byte_run() {
                let slot = runs.entry((o, n)).or_insert(Iv::full(8 * n));
                {
                    let m = slot.meet(now)?;
                    if m != *slot {
                        *slot = m;
                        changed = true;
                    }
                }
                // bytes below a fixed prefix are bounded by the range's digits
                for k in (0..n).rev() {
                    let shift = 8 * (k + 1);
                    if shift < 128 && now.lo >> shift != now.hi >> shift {
                        break;
                    }
                    let b = Iv { lo: (now.lo >> (8 * k)) & 255, hi: (now.hi >> (8 * k)) & 255 };
                    let slot = &mut bytes[(o + k) as usize];
                    let m = slot.meet(b)?;
                    if m != *slot {
                        *slot = m;
                        changed = true;
                    }
                }
                continue;
            }
            match &e.kind {
                Kind::Cmp(p, a, b) if now == Iv::point(1) => {
                    let (ia, ib) = (idx(a), idx(b));
                    if let Some(r) = side_range(*p, a.width, ivs[ib], true) {
                        work.push((ia, r?));
                    }
                    if let Some(r) = side_range(*p, a.width, ivs[ia], false) {
                        work.push((ib, r?));
                    }
                    if *p == CmpPred::Ne {
                        for (x, y) in [(ia, ib), (ib, ia)] {
                            if ivs[y].lo == ivs[y].hi {
                                let c = ivs[y].lo;
                                let mut r = ivs[x];
                                if r.lo == c {
                                    r.lo = r.lo.checked_add(1)?;
                                }
                                if r.hi == c {
                                    r.hi = r.hi.checked_sub(1)?;
                                }
                                if r.lo > r.hi {
                                    return None;
                                }
                                work.push((x, r));
                            }
                        }
                    }
                }
                Kind::Bin(BinOp::And, a, b) if e.width == 1 && now == Iv::point(1) => {
                    work.push((idx(a), Iv::point(1)));
                    work.push((idx(b), Iv::point(1)));
                }
                Kind::Cast(CastOp::Zext, a) => {
                    work.push((idx(a), now.meet(Iv::full(a.width))?));
                }
                Kind::Not(a) => {
                    let m = mask(e.width);
                    work.push((idx(a), Iv { lo: m - now.hi, hi: m - now.lo }));
                }
                Kind::Bin(op @ BinOp::Arith(ArithOp::Add | ArithOp::Sub, _), a, b) => {
                    let m = mask(e.width);
                    let Some(k) = b.as_const() else { continue };
                    // a + k' == now, with k' the addend
                    let k = if matches!(op, BinOp::Arith(ArithOp::Add, _)) { k } else { k.wrapping_neg() & m };
                    if now.lo >= k {
                        work.push((idx(a), Iv { lo: now.lo - k, hi: now.hi - k }));
                    } else if now.hi < k {
                        let shift = m - k + 1;
                        work.push((idx(a), Iv { lo: now.lo + shift, hi: now.hi + shift }));
                    }
                }
                _ => {}
            }
        }
        if !changed {
            break;
        }
    }
    Some(bytes.iter().map(|b| (b.lo as u8, b.hi as u8)).collect())
}

// ---------------------------------------------------------------------------
// search

struct Search<'t> {
    tape: &'t Tape,
    vals: Vec<u128>,
    bytes: Vec<u8>,
    rng: ChaCha8Rng,
}

/// Multiplicative inverse of an odd number modulo 2^128.
fn inverse_odd(m: u128) -> u128 {
    let mut x = m;
    for _ in 0..7 {
        x = x.wrapping_mul(2u128.wrapping_sub(m.wrapping_mul(x)));
    }
    x
}

impl Search<'_> {
    fn check(&mut self) -> bool {
        self.tape.all_true(&self.bytes, &mut self.vals)
    }

    fn refresh(&mut self) {
        self.tape.eval(&self.bytes, &mut self.vals);
    }

    fn idx(&self, e: &ExprRef) -> usize {
        self.tape.index_of(e).unwrap()
    }

    fn val(&self, e: &ExprRef) -> u128 {
        self.vals[self.idx(e)]
    }

    /// Tries to make `e` evaluate to `target` by rewriting input bytes,
    /// assuming sibling subterms keep their current values. Leaves the
    /// bytes unchanged on failure.
    fn invert(&mut self, e: &ExprRef, target: u128, depth: u32) -> bool {
        let saved = self.bytes.clone();
        let ok = depth < 64 && self.invert_raw(e, target, depth) && {
            self.refresh();
            self.val(e) == target
        };
        if !ok {
            self.bytes = saved;
            self.refresh();
        }
        ok
    }

    fn invert_raw(&mut self, e: &ExprRef, target: u128, depth: u32) -> bool {
        let w = e.width;
        let m = mask(w);
        if target & m != target {
            return false;
        }
        if self.val(e) == target {
            return true;
        }
        match &e.kind {
            Kind::Const(c) => *c == target,
            Kind::Byte(o) => {
                self.bytes[*o as usize] = target as u8;
                true
            }
            Kind::Concat(parts) => {
                let mut sh = 0;
                for p in parts {
                    let t = (target >> sh) & mask(p.width);
                    sh += p.width;
                    if !self.invert_raw(p, t, depth + 1) {
                        return false;
                    }
                }
                true
            }
            Kind::Bin(op, a, b) => self.invert_bin(*op, w, a, b, target, depth),
            Kind::Cast(op, a) => {
                let from = a.width;
                match op {
                    CastOp::Zext => target <= mask(from) && self.invert(a, target, depth + 1),
                    CastOp::Sext => {
                        let t = target & mask(from);
                        super::expr::eval_cast(CastOp::Sext, from, w, t) == target && self.invert(a, t, depth + 1)
                    }
                    CastOp::Trunc => {
                        let t = (self.val(a) & !m) | target;
                        self.invert(a, t & mask(from), depth + 1)
                    }
                }
            }
            Kind::Not(a) => self.invert(a, !target & m, depth + 1),
            Kind::Cmp(p, a, b) => self.make_cmp(*p, a, b, target == 1, depth),
        }
    }

    fn invert_bin(&mut self, op: BinOp, w: u32, a: &ExprRef, b: &ExprRef, t: u128, depth: u32) -> bool {
        let m = mask(w);
        let (va, vb) = (self.val(a), self.val(b));
        let sides: [(bool, &ExprRef, u128); 2] = [(true, a, vb), (false, b, va)];
        for (is_left, side, other) in sides {
            if side.support.is_empty() {
                continue;
            }
            let cur = self.val(side);
            let want = match op {
                BinOp::Arith(ArithOp::Add, _) => Some(t.wrapping_sub(other) & m),
                BinOp::Arith(ArithOp::Sub, _) => Some(if is_left { t.wrapping_add(other) & m } else { other.wrapping_sub(t) & m }),
                BinOp::Xor => Some(t ^ other),
                BinOp::Arith(ArithOp::Mul, _) => {
                    if other == 0 {
                        None
                    } else {
                        let k = other.trailing_zeros();
                        if t.trailing_zeros() < k && t != 0 {
                            None
                        } else {
                            let odd = other >> k;
                            let low = (t >> k).wrapping_mul(inverse_odd(odd)) & mask(w - k);
                            Some(low | (cur & !mask(w - k) & m))
                        }
                    }
                }
                BinOp::And => (t & !other == 0).then_some((cur & !other) | t),
                BinOp::Or => (t & other == other).then_some((t & !other) | (cur & other)),
                BinOp::Shl if is_left => {
                    let sh = (other & (w as u128 - 1)) as u32;
                    (t & mask(sh) == 0).then(|| (t >> sh) | (cur & (m ^ (m >> sh))))
                }
                BinOp::LShr if is_left => {
                    let sh = (other & (w as u128 - 1)) as u32;
                    (t <= m >> sh).then(|| ((t << sh) & m) | (cur & mask(sh)))
                }
                BinOp::AShr if is_left => {
                    let sh = (other & (w as u128 - 1)) as u32;
                    Some(((t << sh) & m) | (cur & mask(sh)))
                }
                _ => None,
            };
            if let Some(v) = want {
                if self.invert(side, v, depth + 1) {
                    return true;
                }
            }
        }
        false
    }

    /// Makes `a pred b` evaluate to `want`.
    fn make_cmp(&mut self, p: CmpPred, a: &ExprRef, b: &ExprRef, want: bool, depth: u32) -> bool {
        if !want {
            let (p, a, b) = match p {
                CmpPred::Eq => (CmpPred::Ne, a, b),
                CmpPred::Ne => (CmpPred::Eq, a, b),
                CmpPred::Ult => (CmpPred::Ule, b, a),
                CmpPred::Ule => (CmpPred::Ult, b, a),
                CmpPred::Slt => (CmpPred::Sle, b, a),
                CmpPred::Sle => (CmpPred::Slt, b, a),
            };
            return self.make_cmp(p, a, b, true, depth);
        }
        let w = a.width;
        let m = mask(w);
        let (signed, up) = match p {
            CmpPred::Slt => (true, CmpPred::Ult),
            CmpPred::Sle => (true, CmpPred::Ule),
            other => (false, other),
        };
        let flip = if signed { 1u128 << (w - 1) } else { 0 };
        for (left, side, other) in [(true, a, b), (false, b, a)] {
            if side.support.is_empty() {
                continue;
            }
            let vo = self.val(other) ^ flip;
            let cur = self.val(side) ^ flip;
            let mut cands: Vec<u128> = Vec::new();
            if up == CmpPred::Ne {
                cands.extend([vo.wrapping_add(1) & m, vo.wrapping_sub(1) & m, cur ^ 1]);
            } else {
                let Some(Some(r)) = side_range(up, w, Iv::point(vo), left) else { continue };
                cands.push(cur.clamp(r.lo, r.hi));
                cands.push(r.lo);
                cands.push(r.hi);
                for _ in 0..4 {
                    cands.push(self.rng.gen_range(r.lo..=r.hi));
                }
            }
            for c in cands {
                if self.invert(side, c ^ flip, depth + 1) && eval_cmp(p, w, self.val(a), self.val(b)) {
                    return true;
                }
            }
        }
        false
    }

    /// Repeatedly fixes the first false constraint by inversion.
    fn repair(&mut self) -> bool {
        let roots = self.tape.roots.clone();
        for _ in 0..4 * roots.len() + 8 {
            self.refresh();
            let Some(&bad) = roots.iter().find(|&&r| self.vals[r] & 1 == 0) else {
                return true;
            };
            let e = self.tape.nodes[bad].clone();
            if !self.invert(&e, 1, 0) {
                return false;
            }
        }
        self.check()
    }

    fn exhaustive(&mut self, support: &[u32], ranges: &[(u8, u8)]) -> bool {
        let mut digits: Vec<u8> = support.iter().map(|&o| ranges[o as usize].0).collect();
        loop {
            for (k, &o) in support.iter().enumerate() {
                self.bytes[o as usize] = digits[k];
            }
            if self.check() {
                return true;
            }
            // odometer increment within each byte's range
            let mut k = 0;
            loop {
                if k == support.len() {
                    return false;
                }
                let (lo, hi) = ranges[support[k] as usize];
                if digits[k] < hi {
                    digits[k] += 1;
                    break;
                }
                digits[k] = lo;
                k += 1;
            }
        }
    }

    /// Distance-guided hill climbing with restarts.
    fn local_search(&mut self, support: &[u32], ranges: &[(u8, u8)], budget: u32) -> bool {
        let mut best = self.cost();
        let mut stale = 0;
        for _ in 0..budget {
            let saved = self.bytes.clone();
            let o = support[self.rng.gen_range(0..support.len())] as usize;
            let (lo, hi) = ranges[o];
            match self.rng.gen_range(0..4) {
                0 => self.bytes[o] = self.rng.gen_range(lo..=hi),
                1 => self.bytes[o] ^= 1 << self.rng.gen_range(0..8),
                2 => {
                    let d: u8 = self.rng.gen_range(1..=35);
                    self.bytes[o] = if self.rng.gen() { self.bytes[o].wrapping_add(d) } else { self.bytes[o].wrapping_sub(d) };
                }
                _ => {
                    if self.repair() {
                        return true;
                    }
                }
            }
            self.bytes[o] = self.bytes[o].clamp(lo, hi);
            let c = self.cost();
            if c == 0 {
                return self.check();
            }
            if c <= best {
                if c < best {
                    stale = 0;
                }
                best = c;
            } else {
                self.bytes = saved;
                stale += 1;
            }
            if stale > 64 {
                for &o in support {
                    let (lo, hi) = ranges[o as usize];
                    self.bytes[o as usize] = self.rng.gen_range(lo..=hi);
                }
                best = self.cost();
                stale = 0;
            }
        }
        false
    }

    /// Sum over false constraints of 1 plus a log-distance to satisfaction.
    fn cost(&mut self) -> u64 {
        self.refresh();
        let mut total = 0u64;
        for &r in &self.tape.roots {
            if self.vals[r] & 1 == 1 {
                continue;
            }
            let e = &self.tape.nodes[r];
            let d = match &e.kind {
                Kind::Cmp(_, a, b) => {
                    let (x, y) = (self.val(a), self.val(b));
                    let diff = x.abs_diff(y);
                    128 - diff.leading_zeros() as u64
                }
                _ => 1,
            };
            total += 1 + d;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::super::expr::*;
    use super::*;
    use crate::ir::Signedness;

    const ADD: BinOp = BinOp::Arith(ArithOp::Add, Signedness::Unsigned);

    fn run(cs: &[ExprRef], hint: &[u8]) -> SolveResult {
        solve(cs, hint, &SolverConfig::default())
    }

    #[test]
    fn magic_word_by_inversion() {
        let c = cmp(CmpPred::Eq, input(0, 4), konst(32, 0xCAFEBABE));
        let r = run(&[c], &[0; 8]);
        assert_eq!(r.apply(&[0; 8]).unwrap(), vec![0xBE, 0xBA, 0xFE, 0xCA, 0, 0, 0, 0]);
    }

    #[test]
    fn wraparound_inversion() {
        let c = cmp(CmpPred::Eq, bin(ADD, byte(3), konst(8, 1)), konst(8, 0));
        let r = run(&[c], &[0; 4]);
        assert_eq!(r.witness().unwrap().get(&3), Some(&0xFF));
    }

    #[test]
    fn empty_interval_is_unsat() {
        let lt = cmp(CmpPred::Ult, byte(0), konst(8, 5));
        let gt = cmp(CmpPred::Ult, konst(8, 200), byte(0));
        assert_eq!(run(&[lt, gt], &[0]).status, SolveStatus::Unsat);
    }

    #[test]
    fn guard_contradicts_wide_overflow() {
        let x = input(0, 4);
        let guard = cmp(CmpPred::Ult, x.clone(), konst(32, 10));
        let sum = bin(ADD, zext(x, 64), konst(64, 0x8000_0000));
        let ov = cmp(CmpPred::Ult, konst(64, 0xFFFF_FFFF), sum);
        assert_eq!(run(&[guard, ov.clone()], &[0; 4]).status, SolveStatus::Unsat);
        assert!(run(&[ov], &[0; 4]).is_sat());
    }

    #[test]
    fn overflow_witness_is_all_ones() {
        let x = input(0, 4);
        let sum = bin(ADD, zext(x, 64), konst(64, 1));
        let ov = cmp(CmpPred::Ult, konst(64, 0xFFFF_FFFF), sum);
        let r = run(&[ov], &[0; 4]);
        assert_eq!(r.apply(&[0; 4]).unwrap(), vec![0xFF; 4]);
    }

    #[test]
    fn signed_compare_repair() {
        let x = input(0, 2);
        let c = cmp(CmpPred::Slt, x, konst(16, 0xFF00)); // x < -256
        let r = run(std::slice::from_ref(&c), &[0; 2]);
        let b = r.apply(&[0; 2]).unwrap();
        assert_eq!(c.eval(&b), 1);
    }

    #[test]
    fn same_seed_same_answer() {
        let mul = bin(BinOp::Arith(ArithOp::Mul, Signedness::Unsigned), byte(0), byte(1));
        let c = cmp(CmpPred::Eq, bin(BinOp::Xor, mul, byte(2)), konst(8, 0x5A));
        let r1 = run(std::slice::from_ref(&c), &[3, 5, 7]);
        let r2 = run(std::slice::from_ref(&c), &[3, 5, 7]);
        assert_eq!(r1, r2);
        assert!(r1.is_sat());
        assert_eq!(c.eval(&r1.apply(&[3, 5, 7]).unwrap()), 1);
    }
}
