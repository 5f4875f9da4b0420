//! Undefined-behavior labels: one per eligible instruction, each carrying the
//! trigger condition of its family.

use std::collections::BTreeMap;
use std::fmt;

use crate::ir::{ArithOp, BinOp, Op, Operand, Program, Signedness, Site, Width};

pub type LabelId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    OutOfBounds,
    OversizedShift,
    SignedOverflow,
    UnsignedOverflow,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::OutOfBounds => "OOB",
            Family::OversizedShift => "OversizedShift",
            Family::SignedOverflow => "SignedOverflow",
            Family::UnsignedOverflow => "UnsignedOverflow",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trigger predicate of a label, over the host instruction's operands.
///
/// Array indices and shift amounts are read as unsigned values of their
/// width, so the `x < 0` half of the OOB and shift rows is folded into the
/// upper-bound test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// `index >= len`
    OutOfBounds { index: Operand, len: u64 },
    /// `amount >= width`
    OversizedShift { amount: Operand, width: Width },
    /// The exact signed result of `lhs op rhs` lies outside
    /// `[-2^(n-1), 2^(n-1) - 1]`.
    SignedOverflow { op: ArithOp, lhs: Operand, rhs: Operand, width: Width },
    /// The exact unsigned result of `lhs op rhs` lies outside `[0, 2^n - 1]`.
    UnsignedOverflow { op: ArithOp, lhs: Operand, rhs: Operand, width: Width },
}

impl Condition {
    pub fn family(&self) -> Family {
        match self {
            Condition::OutOfBounds { .. } => Family::OutOfBounds,
            Condition::OversizedShift { .. } => Family::OversizedShift,
            Condition::SignedOverflow { .. } => Family::SignedOverflow,
            Condition::UnsignedOverflow { .. } => Family::UnsignedOverflow,
        }
    }

    /// Operands the condition reads, in slot order.
    pub fn operands(&self) -> Vec<Operand> {
        match *self {
            Condition::OutOfBounds { index, .. } => vec![index],
            Condition::OversizedShift { amount, .. } => vec![amount],
            Condition::SignedOverflow { lhs, rhs, .. } | Condition::UnsignedOverflow { lhs, rhs, .. } => vec![lhs, rhs],
        }
    }

    /// Evaluates the predicate on concrete operand values (same order as
    /// [`Condition::operands`]).
    pub fn holds(&self, vals: &[u64]) -> bool {
        match *self {
            Condition::OutOfBounds { len, .. } => vals[0] >= len,
            Condition::OversizedShift { width, .. } => vals[0] & width.mask() >= width.bits() as u64,
            Condition::SignedOverflow { op, width, .. } => {
                let (a, b) = (width.to_signed(vals[0]) as i128, width.to_signed(vals[1]) as i128);
                match exact(op, a, b) {
                    Some(r) => r < width.signed_min() as i128 || r > width.signed_max() as i128,
                    None => false,
                }
            }
            Condition::UnsignedOverflow { op, width, .. } => {
                let (a, b) = ((vals[0] & width.mask()) as i128, (vals[1] & width.mask()) as i128);
                match exact(op, a, b) {
                    Some(r) => r < 0 || r > width.mask() as i128,
                    None => false,
                }
            }
        }
    }
}

/// Mathematical result; `None` for division by zero, which is not labeled.
fn exact(op: ArithOp, a: i128, b: i128) -> Option<i128> {
    match op {
        ArithOp::Add => Some(a + b),
        ArithOp::Sub => Some(a - b),
        // a 64-bit product can exceed i128; any such value is out of range anyway
        ArithOp::Mul => Some(a.checked_mul(b).unwrap_or(i128::MAX)),
        ArithOp::Div if b == 0 => None,
        // truncating division, as in C
        ArithOp::Div => Some(a / b),
        ArithOp::Rem if b == 0 => None,
        ArithOp::Rem => Some(a % b),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Live,
    Trimmed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BugLabel {
    pub id: LabelId,
    pub site: Site,
    pub condition: Condition,
    pub status: Status,
}

impl BugLabel {
    pub fn family(&self) -> Family {
        self.condition.family()
    }

    pub fn is_live(&self) -> bool {
        self.status == Status::Live
    }
}

/// All labels of a program, addressable by id and by site.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<BugLabel>,
    by_site: BTreeMap<Site, LabelId>,
    /// `index[func][block][instr]`, for the interpreter's hot path.
    index: Vec<Vec<Vec<Option<LabelId>>>>,
}

impl LabelSet {
    pub fn empty(program: &Program) -> Self {
        Self::from_labels(program, Vec::new())
    }

    pub(crate) fn from_labels(program: &Program, labels: Vec<BugLabel>) -> Self {
        let mut index: Vec<Vec<Vec<Option<LabelId>>>> = program
            .functions
            .iter()
            .map(|f| f.blocks.iter().map(|b| vec![None; b.instrs.len()]).collect())
            .collect();
        let mut by_site = BTreeMap::new();
        for l in &labels {
            index[l.site.func as usize][l.site.block as usize][l.site.index as usize] = Some(l.id);
            by_site.insert(l.site, l.id);
        }
        Self { labels, by_site, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, id: LabelId) -> Option<&BugLabel> {
        id.checked_sub(1).and_then(|i| self.labels.get(i as usize))
    }

    pub fn iter(&self) -> impl Iterator<Item = &BugLabel> {
        self.labels.iter()
    }

    pub fn live(&self) -> impl Iterator<Item = &BugLabel> {
        self.labels.iter().filter(|l| l.is_live())
    }

    pub fn live_count(&self) -> usize {
        self.live().count()
    }

    pub fn at_site(&self, site: Site) -> Option<&BugLabel> {
        self.by_site.get(&site).and_then(|&id| self.get(id))
    }

    /// The live label hosted at an instruction, if any.
    #[inline]
    pub fn live_at(&self, func: u32, block: u32, index: usize) -> Option<&BugLabel> {
        let id = (*self.index.get(func as usize)?.get(block as usize)?.get(index)?)?;
        let l = &self.labels[(id - 1) as usize];
        l.is_live().then_some(l)
    }

    /// Live labels hosted in one block.
    pub fn live_in_block(&self, func: u32, block: u32) -> impl Iterator<Item = LabelId> + '_ {
        self.index
            .get(func as usize)
            .and_then(|f| f.get(block as usize))
            .into_iter()
            .flatten()
            .filter_map(|id| *id)
            .filter(|&id| self.labels[(id - 1) as usize].is_live())
    }

    pub(crate) fn set_status(&mut self, id: LabelId, status: Status) {
        self.labels[(id - 1) as usize].status = status;
    }
}

/// Puts one live label on every eligible instruction, numbering from 1 in
/// program order (functions, then blocks, then instructions).
pub fn place_labels(program: &Program) -> LabelSet {
    let mut labels = Vec::new();
    for (fi, f) in program.functions.iter().enumerate() {
        for (bi, b) in f.blocks.iter().enumerate() {
            for (ii, instr) in b.instrs.iter().enumerate() {
                let condition = match &instr.op {
                    Op::Bin { op: BinOp::Arith(op, sign), lhs, rhs } => {
                        let (op, lhs, rhs, width) = (*op, *lhs, *rhs, instr.width);
                        Some(match sign {
                            Signedness::Signed => Condition::SignedOverflow { op, lhs, rhs, width },
                            Signedness::Unsigned => Condition::UnsignedOverflow { op, lhs, rhs, width },
                        })
                    }
                    Op::Bin { op, rhs, .. } if op.is_shift() => Some(Condition::OversizedShift { amount: *rhs, width: instr.width }),
                    Op::ArrLoad { arr, index } | Op::ArrStore { arr, index, .. } => match f.regs[*arr as usize].ty {
                        crate::ir::Ty::Array { len, .. } => Some(Condition::OutOfBounds { index: *index, len: len as u64 }),
                        crate::ir::Ty::Int(_) => None,
                    },
                    _ => None,
                };
                if let Some(condition) = condition {
                    labels.push(BugLabel {
                        id: labels.len() as LabelId + 1,
                        site: Site { func: fi as u32, block: bi as u32, index: ii as u32 },
                        condition,
                        status: Status::Live,
                    });
                }
            }
        }
    }
    LabelSet::from_labels(program, labels)
}
