//! Concolic execution: replays a seed with a symbolic shadow on every value,
//! verifies labels met on the path, and flips branches into uncovered code.

pub mod expr;
pub mod solver;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::fuzz::{Branch, CoverageMap};
use crate::interp::{execute, run_concrete, ExecConfig, ExecTrace, Hooks, Val};
use crate::ir::{ArithOp, BinOp, BlockRef, CastOp, CmpPred, Program, Width};
use crate::labels::{BugLabel, Condition, LabelId, LabelSet};
use expr::ExprRef;
use solver::{solve, SolveResult, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConcolicConfig {
    pub exec: ExecConfig,
    pub solver: SolverConfig,
    /// Budget units charged per solver query.
    pub query_cost: u64,
    /// Verification attempts per label per run.
    pub verify_per_label: u32,
    /// Re-evaluate every symbolic value against the seed (slow; for tests).
    pub shadow_check: bool,
}

impl Default for ConcolicConfig {
    fn default() -> Self {
        Self { exec: ExecConfig::default(), solver: SolverConfig::default(), query_cost: 100, verify_per_label: 2, shadow_check: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    /// Label condition under the path condition.
    Full,
    /// Label condition alone.
    Optimistic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationOutcome {
    pub label: LabelId,
    pub mode: Mode,
    pub result: SolveResult,
    /// The witness, replayed concretely, violates the label.
    pub confirmed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestKind {
    Flip(Branch),
    Verify { label: LabelId, mode: Mode },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestCase {
    pub bytes: Vec<u8>,
    pub kind: TestKind,
    pub support: BTreeSet<u32>,
    /// Path-condition entries kept from the seed: the flipped entry's index,
    /// or the label's prefix length.
    pub depth: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConcolicOutcome {
    pub tests: Vec<TestCase>,
    pub verifications: Vec<VerificationOutcome>,
    /// Uncovered arms a flip was attempted for, in path order.
    pub attempted: Vec<Branch>,
    /// Labels whose verification witness was confirmed by replay.
    pub triggered: BTreeMap<LabelId, Vec<u8>>,
    pub budget_exhausted: bool,
    pub units_used: u64,
    pub queries: u32,
    pub shadow_mismatches: u32,
}

/// One conjunct of the path condition.
#[derive(Clone, Debug)]
pub enum PathEntry {
    Branch { site: BlockRef, taken: bool, cond: ExprRef },
    /// A symbolic address or call index fixed to its concrete value.
    Pin(ExprRef),
}

impl PathEntry {
    pub fn constraint(&self) -> &ExprRef {
        match self {
            PathEntry::Branch { cond, .. } => cond,
            PathEntry::Pin(c) => c,
        }
    }
}

#[derive(Clone, Debug)]
struct LabelEvent {
    label: LabelId,
    /// Path-condition length when the label was met.
    prefix: usize,
    cond: ExprRef,
}

/// Symbolic state of one run, driven by the interpreter.
struct Shadow<'a> {
    seed: &'a [u8],
    skip: &'a BTreeSet<LabelId>,
    verify_cap: u32,
    shadow_check: bool,
    units: u64,
    limit: u64,
    halted: bool,
    path: Vec<PathEntry>,
    events: Vec<LabelEvent>,
    per_label: HashMap<LabelId, u32>,
    mismatches: u32,
}

impl Shadow<'_> {
    fn charge(&mut self, e: &ExprRef, conc: u64) {
        self.units += 1;
        if self.units >= self.limit {
            self.halted = true;
        }
        if self.shadow_check && e.eval(self.seed) != conc as u128 {
            self.mismatches += 1;
        }
    }

    fn lift(v: &Val<Option<ExprRef>>, w: Width) -> ExprRef {
        v.sym.clone().unwrap_or_else(|| expr::konst(w.bits(), v.conc as u128))
    }
}

/// Trigger condition of a label as a width-1 expression.
pub fn label_condition(cond: &Condition, ops: &[ExprRef]) -> ExprRef {
    use expr::{bin, cmp, konst, sext, zext};
    let unsigned = BinOp::Arith(ArithOp::Add, crate::ir::Signedness::Unsigned);
    match *cond {
        Condition::OutOfBounds { len, .. } => {
            let w = ops[0].width;
            if len as u128 > expr::mask(w) {
                expr::bool_const(false)
            } else {
                cmp(CmpPred::Ule, konst(w, len as u128), ops[0].clone())
            }
        }
        Condition::OversizedShift { width, .. } => cmp(CmpPred::Ule, konst(width.bits(), width.bits() as u128), ops[0].clone()),
        Condition::UnsignedOverflow { op, width, .. } => {
            let (w, a, b) = (width.bits(), ops[0].clone(), ops[1].clone());
            match op {
                ArithOp::Sub => cmp(CmpPred::Ult, a, b),
                ArithOp::Div | ArithOp::Rem => expr::bool_const(false),
                ArithOp::Add | ArithOp::Mul => {
                    let r = bin(BinOp::Arith(op, crate::ir::Signedness::Unsigned), zext(a, 2 * w), zext(b, 2 * w));
                    cmp(CmpPred::Ult, konst(2 * w, expr::mask(w)), r)
                }
            }
        }
        Condition::SignedOverflow { op, width, .. } => {
            let (w, a, b) = (width.bits(), ops[0].clone(), ops[1].clone());
            match op {
                ArithOp::Rem => expr::bool_const(false),
                ArithOp::Div => {
                    let min = cmp(CmpPred::Eq, a, konst(w, 1u128 << (w - 1)));
                    let neg1 = cmp(CmpPred::Eq, b, konst(w, expr::mask(w)));
                    expr::and(min, neg1)
                }
                ArithOp::Add | ArithOp::Sub | ArithOp::Mul => {
                    let r = bin(BinOp::Arith(op, crate::ir::Signedness::Signed), sext(a, 2 * w), sext(b, 2 * w));
                    // in range iff r + 2^(w-1) fits in w unsigned bits
                    let shifted = bin(unsigned, r, konst(2 * w, 1u128 << (w - 1)));
                    cmp(CmpPred::Ult, konst(2 * w, expr::mask(w)), shifted)
                }
            }
        }
    }
}

impl Hooks for Shadow<'_> {
    type Sym = Option<ExprRef>;

    fn halted(&self) -> bool {
        self.halted
    }

    fn input(&mut self, offset: u32, bytes: u8) -> Self::Sym {
        Some(expr::input(offset, bytes as u32))
    }

    fn bin(&mut self, op: BinOp, w: Width, a: &Val<Self::Sym>, b: &Val<Self::Sym>, result: u64) -> Self::Sym {
        if a.sym.is_none() && b.sym.is_none() {
            return None;
        }
        let e = expr::bin(op, Self::lift(a, w), Self::lift(b, w));
        if e.is_const() {
            return None;
        }
        self.charge(&e, result);
        Some(e)
    }

    fn cast(&mut self, op: CastOp, _from: Width, to: Width, a: &Val<Self::Sym>, result: u64) -> Self::Sym {
        let e = expr::cast(op, a.sym.clone()?, to.bits());
        self.charge(&e, result);
        Some(e)
    }

    fn cmp(&mut self, pred: CmpPred, w: Width, a: &Val<Self::Sym>, b: &Val<Self::Sym>, result: bool) -> Self::Sym {
        if a.sym.is_none() && b.sym.is_none() {
            return None;
        }
        let e = expr::cmp(pred, Self::lift(a, w), Self::lift(b, w));
        if e.is_const() {
            return None;
        }
        self.charge(&e, result as u64);
        Some(e)
    }

    fn concretize(&mut self, v: &Val<Self::Sym>, _w: Width) {
        if let Some(e) = &v.sym {
            let pin = expr::cmp(CmpPred::Eq, e.clone(), expr::konst(e.width, v.conc as u128));
            self.path.push(PathEntry::Pin(pin));
        }
    }

    fn branch(&mut self, site: BlockRef, cond: &Val<Self::Sym>, taken: bool, _step: usize) {
        if let Some(e) = &cond.sym {
            let c = expr::truth(e.clone());
            let cond = if taken { c } else { expr::not(c) };
            self.path.push(PathEntry::Branch { site, taken, cond });
        }
    }

    fn label(&mut self, label: &BugLabel, operands: &[Val<Self::Sym>], violated: bool, _step: usize) {
        if violated || self.skip.contains(&label.id) || operands.iter().all(|o| o.sym.is_none()) {
            return;
        }
        let seen = self.per_label.entry(label.id).or_insert(0);
        if *seen >= self.verify_cap {
            return;
        }
        *seen += 1;
        let widths: Vec<Width> = match label.condition {
            Condition::OutOfBounds { .. } => {
                vec![operands[0].sym.as_ref().map_or(Width::W64, |e| Width::new(e.width).unwrap_or(Width::W64))]
            }
            Condition::OversizedShift { width, .. } => vec![width],
            Condition::SignedOverflow { width, .. } | Condition::UnsignedOverflow { width, .. } => vec![width, width],
        };
        let ops: Vec<ExprRef> = operands.iter().zip(widths).map(|(o, w)| Self::lift(o, w)).collect();
        let cond = label_condition(&label.condition, &ops);
        if !cond.is_const() {
            self.events.push(LabelEvent { label: label.id, prefix: self.path.len(), cond });
        }
    }
}

/// Constraints from `prefix` that share input bytes, transitively, with
/// `target`; the rest are satisfied by the seed's untouched bytes.
fn slice(prefix: &[PathEntry], target: &ExprRef) -> Vec<ExprRef> {
    let mut support: BTreeSet<u32> = target.support.iter().copied().collect();
    let mut taken = vec![false; prefix.len()];
    let mut changed = true;
    while changed {
        changed = false;
        for (i, p) in prefix.iter().enumerate() {
            let c = p.constraint();
            if !taken[i] && c.support.iter().any(|o| support.contains(o)) {
                taken[i] = true;
                support.extend(c.support.iter().copied());
                changed = true;
            }
        }
    }
    let mut out: Vec<ExprRef> = prefix.iter().zip(&taken).filter(|(_, &t)| t).map(|(p, _)| p.constraint().clone()).collect();
    out.push(target.clone());
    out
}

/// Concolic executor. Holds program-level tables across runs; everything
/// tied to one seed is dropped by [`ConcolicEngine::reset`].
pub struct ConcolicEngine<'p> {
    program: &'p Program,
    labels: &'p LabelSet,
    pub config: ConcolicConfig,
    path: Vec<PathEntry>,
    events: Vec<LabelEvent>,
    runs: u64,
}

impl<'p> ConcolicEngine<'p> {
    pub fn new(program: &'p Program, labels: &'p LabelSet, config: ConcolicConfig) -> Self {
        Self { program, labels, config, path: Vec::new(), events: Vec::new(), runs: 0 }
    }

    pub fn reset(&mut self) {
        self.path = Vec::new();
        self.events = Vec::new();
    }

    /// Per-seed entries currently retained.
    pub fn state_size(&self) -> usize {
        self.path.len() + self.events.len()
    }

    pub fn runs(&self) -> u64 {
        self.runs
    }

    /// Path condition of the last run.
    pub fn path_condition(&self) -> &[PathEntry] {
        &self.path
    }

    fn replay(&self, bytes: &[u8]) -> ExecTrace {
        run_concrete(self.program, self.labels, bytes, &self.config.exec)
    }

    /// Runs one seed. `skip` lists labels already triggered (not verified
    /// again); `cov` decides which branch arms count as uncovered.
    pub fn run(&mut self, seed: &[u8], cov: &CoverageMap, skip: &BTreeSet<LabelId>, timeout_units: u64) -> ConcolicOutcome {
        self.reset();
        self.runs += 1;
        let mut seed = seed.to_vec();
        seed.resize(self.program.input_len as usize, 0);
        let mut shadow = Shadow {
            seed: &seed,
            skip,
            verify_cap: self.config.verify_per_label,
            shadow_check: self.config.shadow_check,
            units: 0,
            limit: timeout_units.max(1),
            halted: false,
            path: Vec::new(),
            events: Vec::new(),
            per_label: HashMap::new(),
            mismatches: 0,
        };
        let _trace = execute(self.program, self.labels, &seed, &self.config.exec, &mut shadow);
        let mut out = ConcolicOutcome { shadow_mismatches: shadow.mismatches, budget_exhausted: shadow.halted, ..Default::default() };
        let mut used = shadow.units;
        self.path = std::mem::take(&mut shadow.path);
        self.events = std::mem::take(&mut shadow.events);
        let cost = self.config.query_cost;
        let afford = |used: &mut u64, out: &mut ConcolicOutcome| {
            if *used + cost > timeout_units {
                out.budget_exhausted = true;
                false
            } else {
                *used += cost;
                out.queries += 1;
                true
            }
        };

        // bug-guided verification first
        'events: for ev in &self.events {
            if out.triggered.contains_key(&ev.label) {
                continue;
            }
            for mode in [Mode::Full, Mode::Optimistic] {
                if !afford(&mut used, &mut out) {
                    break 'events;
                }
                let cs = match mode {
                    Mode::Full => slice(&self.path[..ev.prefix], &ev.cond),
                    Mode::Optimistic => vec![ev.cond.clone()],
                };
                let result = solve(&cs, &seed, &self.config.solver);
                let mut confirmed = false;
                if let Some(bytes) = result.apply(&seed) {
                    confirmed = self.replay(&bytes).violated(ev.label);
                    if confirmed {
                        out.triggered.insert(ev.label, bytes.clone());
                    }
                    out.tests.push(TestCase { bytes, kind: TestKind::Verify { label: ev.label, mode }, support: result.support.clone(), depth: ev.prefix });
                }
                let sat = result.is_sat();
                out.verifications.push(VerificationOutcome { label: ev.label, mode, result, confirmed });
                if sat {
                    break;
                }
            }
        }

        // then flips, in path order
        let mut seen = BTreeSet::new();
        for (i, entry) in self.path.iter().enumerate() {
            let PathEntry::Branch { site, taken, cond } = entry else { continue };
            let flip = Branch { site: *site, dir: !taken };
            let Some(edge) = flip.edge(self.program) else { continue };
            if cov.covered(&edge) || !seen.insert(flip) {
                continue;
            }
            if !afford(&mut used, &mut out) {
                break;
            }
            out.attempted.push(flip);
            let result = solve(&slice(&self.path[..i], &expr::not(cond.clone())), &seed, &self.config.solver);
            if let Some(bytes) = result.apply(&seed) {
                out.tests.push(TestCase { bytes, kind: TestKind::Flip(flip), support: result.support.clone(), depth: i });
            }
        }
        out.units_used = used;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::labels::place_labels;

    const MAGIC: &str = "inputlen 8 func main(entry=b0) { b0: x = in.u32 0 c = cmp.eq x, 0xCAFEBABE br c, b1, b2 b1: ret b2: ret }";

    #[test]
    fn magic_guard_is_flipped() {
        let p = parse_program(MAGIC).unwrap();
        let l = place_labels(&p);
        let mut eng = ConcolicEngine::new(&p, &l, ConcolicConfig::default());
        let seed = [0, 0, 0, 0, 9, 9, 9, 9];
        let out = eng.run(&seed, &CoverageMap::new(), &BTreeSet::new(), 10_000);
        assert_eq!(out.tests.len(), 1);
        assert_eq!(out.tests[0].bytes, vec![0xBE, 0xBA, 0xFE, 0xCA, 9, 9, 9, 9]);
        let t = run_concrete(&p, &l, &out.tests[0].bytes, &ExecConfig::default());
        assert_eq!(t.block_seq[1], BlockRef::new(0, 1));
    }

    #[test]
    fn size_plus_one_is_verified() {
        let src = "inputlen 4 func main(entry=b0) { b0: size = in.u32 0  n = add.u32 size, 1  ret }";
        let p = parse_program(src).unwrap();
        let l = place_labels(&p);
        let mut eng = ConcolicEngine::new(&p, &l, ConcolicConfig { shadow_check: true, ..Default::default() });
        let out = eng.run(&[1, 0, 0, 0], &CoverageMap::new(), &BTreeSet::new(), 10_000);
        assert_eq!(out.triggered.get(&1), Some(&vec![0xFF; 4]));
        assert_eq!(out.verifications[0].mode, Mode::Full);
        assert_eq!(out.shadow_mismatches, 0);
    }

    #[test]
    fn contradicted_label_falls_back_to_optimistic_and_stays_unconfirmed() {
        let src = "inputlen 4 func main(entry=b0) { b0: x = in.u32 0 c = cmp.ult x, 10 br c, b1, b2
                   b1: y = add.u32 x, 0x80000000  ret  b2: ret }";
        let p = parse_program(src).unwrap();
        let l = place_labels(&p);
        let mut eng = ConcolicEngine::new(&p, &l, ConcolicConfig::default());
        let out = eng.run(&[3, 0, 0, 0], &CoverageMap::new(), &BTreeSet::new(), 10_000);
        let modes: Vec<_> = out.verifications.iter().map(|v| (v.mode, v.result.status.clone())).collect();
        assert_eq!(modes[0], (Mode::Full, solver::SolveStatus::Unsat));
        assert_eq!(modes[1].0, Mode::Optimistic);
        assert!(out.verifications[1].result.is_sat());
        assert!(!out.verifications[1].confirmed);
        assert!(out.triggered.is_empty());
    }

    #[test]
    fn reset_leaves_no_per_seed_state() {
        let p = parse_program(MAGIC).unwrap();
        let l = place_labels(&p);
        let mut eng = ConcolicEngine::new(&p, &l, ConcolicConfig::default());
        let a = eng.run(&[1; 8], &CoverageMap::new(), &BTreeSet::new(), 10_000);
        assert!(eng.state_size() > 0);
        eng.reset();
        assert_eq!(eng.state_size(), 0);
        let b = eng.run(&[2; 8], &CoverageMap::new(), &BTreeSet::new(), 10_000);
        let a2 = eng.run(&[1; 8], &CoverageMap::new(), &BTreeSet::new(), 10_000);
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn verification_is_served_before_flips_when_budget_is_short() {
        let src = "inputlen 4 func main(entry=b0) { b0: x = in.u8 0 c = cmp.eq x, 7 br c, b1, b2
                   b1: ret  b2: s = in.u32 0  n = add.u32 s, 1  ret }";
        let p = parse_program(src).unwrap();
        let l = place_labels(&p);
        let mut eng = ConcolicEngine::new(&p, &l, ConcolicConfig::default());
        let out = eng.run(&[0; 4], &CoverageMap::new(), &BTreeSet::new(), 150);
        assert_eq!(out.queries, 1);
        assert!(out.budget_exhausted);
        assert!(out.attempted.is_empty());
        assert!(out.triggered.contains_key(&1));
    }
}
