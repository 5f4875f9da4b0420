//! Deterministic interpreter.
//!
//! Undefined behavior never stops execution: arithmetic wraps, out-of-bounds
//! loads yield 0, out-of-bounds stores are dropped, shift amounts are masked
//! to `width - 1`, and division by zero yields 0. Every live label whose host
//! instruction executes is recorded as reached; labels whose condition holds
//! are recorded as violated (first occurrence per label).
//!
//! The interpreter is generic over [`Hooks`], which lets the concolic engine
//! attach a symbolic shadow to every value while reusing these semantics.

use std::collections::{BTreeMap, BTreeSet};

use crate::ir::{
    ArithOp, BinOp, BlockRef, CastOp, CmpPred, Edge, FuncId, Instr, Op, Operand, Program, RegId, Signedness, Site, Terminator,
    Width,
};
use crate::labels::{BugLabel, LabelId, LabelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecConfig {
    /// Instructions (terminators included) before the run is cut off.
    pub budget: u64,
    pub max_call_depth: u32,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self { budget: 1_000_000, max_call_depth: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Returned,
    BudgetExhausted,
    CallDepthExceeded,
    /// Stopped by the attached hooks.
    Halted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub label: LabelId,
    pub operands: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IcallFault {
    pub site: Site,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecTrace {
    pub block_seq: Vec<BlockRef>,
    pub edge_hits: BTreeMap<Edge, u32>,
    /// Distinct conditional-branch decisions `(branch block, took then-arm)`.
    pub branches: BTreeSet<(BlockRef, bool)>,
    pub labels_reached: BTreeSet<LabelId>,
    pub violations: Vec<Violation>,
    pub ret_code: u64,
    pub instr_count: u64,
    pub status: ExitStatus,
    pub icall_faults: Vec<IcallFault>,
}

impl ExecTrace {
    pub fn violated(&self, label: LabelId) -> bool {
        self.violations.iter().any(|v| v.label == label)
    }
}

/// A register value with its shadow annotation.
#[derive(Clone, Debug, Default)]
pub struct Val<S> {
    pub conc: u64,
    pub sym: S,
}

impl<S: Default> Val<S> {
    pub fn concrete(conc: u64) -> Self {
        Self { conc, sym: S::default() }
    }
}

/// Observation points of the interpreter. Every method has a no-op default.
pub trait Hooks {
    type Sym: Clone + Default;

    fn halted(&self) -> bool {
        false
    }
    fn input(&mut self, _offset: u32, _bytes: u8) -> Self::Sym {
        Self::Sym::default()
    }
    fn bin(&mut self, _op: BinOp, _w: Width, _a: &Val<Self::Sym>, _b: &Val<Self::Sym>, _result: u64) -> Self::Sym {
        Self::Sym::default()
    }
    fn cast(&mut self, _op: CastOp, _from: Width, _to: Width, _a: &Val<Self::Sym>, _result: u64) -> Self::Sym {
        Self::Sym::default()
    }
    fn cmp(&mut self, _pred: CmpPred, _w: Width, _a: &Val<Self::Sym>, _b: &Val<Self::Sym>, _result: bool) -> Self::Sym {
        Self::Sym::default()
    }
    /// A value is about to be used as an address or call-table index.
    fn concretize(&mut self, _v: &Val<Self::Sym>, _w: Width) {}
    /// `step` is the index of `site` in the block sequence.
    fn branch(&mut self, _site: BlockRef, _cond: &Val<Self::Sym>, _taken: bool, _step: usize) {}
    fn label(&mut self, _label: &BugLabel, _operands: &[Val<Self::Sym>], _violated: bool, _step: usize) {}
}

/// Concrete-only execution.
pub struct NoHooks;

impl Hooks for NoHooks {
    type Sym = ();
}

/// Runs `program` on `input` (zero-extended or truncated to `input_len`).
pub fn run_concrete(program: &Program, labels: &LabelSet, input: &[u8], cfg: &ExecConfig) -> ExecTrace {
    execute(program, labels, input, cfg, &mut NoHooks)
}

struct Frame<S> {
    func: FuncId,
    block: u32,
    ip: usize,
    regs: Vec<Val<S>>,
    arrays: Vec<Vec<Val<S>>>,
    ret_dest: Option<RegId>,
}

pub fn execute<H: Hooks>(program: &Program, labels: &LabelSet, input: &[u8], cfg: &ExecConfig, hooks: &mut H) -> ExecTrace {
    let mut bytes = vec![0u8; program.input_len as usize];
    let n = input.len().min(bytes.len());
    bytes[..n].copy_from_slice(&input[..n]);
    Machine {
        program,
        labels,
        input: bytes,
        cfg,
        hooks,
        trace: ExecTrace {
            block_seq: Vec::new(),
            edge_hits: BTreeMap::new(),
            branches: BTreeSet::new(),
            labels_reached: BTreeSet::new(),
            violations: Vec::new(),
            ret_code: 0,
            instr_count: 0,
            status: ExitStatus::Returned,
            icall_faults: Vec::new(),
        },
    }
    .run()
}

struct Machine<'a, H: Hooks> {
    program: &'a Program,
    labels: &'a LabelSet,
    input: Vec<u8>,
    cfg: &'a ExecConfig,
    hooks: &'a mut H,
    trace: ExecTrace,
}

impl<H: Hooks> Machine<'_, H> {
    fn enter(&mut self, to: BlockRef) {
        if let Some(&from) = self.trace.block_seq.last() {
            *self.trace.edge_hits.entry(Edge { from, to }).or_insert(0) += 1;
        }
        self.trace.block_seq.push(to);
    }

    fn new_frame(&self, func: FuncId, args: Vec<Val<H::Sym>>, ret_dest: Option<RegId>) -> Frame<H::Sym> {
        let f = self.program.func(func);
        let mut regs = vec![Val::<H::Sym>::default(); f.regs.len()];
        for (p, a) in f.params.iter().zip(args) {
            regs[*p as usize] = a;
        }
        Frame { func, block: f.entry, ip: 0, regs, arrays: Vec::new(), ret_dest }
    }

    fn run(mut self) -> ExecTrace {
        let entry = self.program.entry;
        let mut stack = vec![self.new_frame(entry, Vec::new(), None)];
        self.enter(BlockRef::new(entry, self.program.func(entry).entry));
        let program = self.program;
        'exec: loop {
            if self.hooks.halted() {
                self.trace.status = ExitStatus::Halted;
                break;
            }
            if self.trace.instr_count >= self.cfg.budget {
                self.trace.status = ExitStatus::BudgetExhausted;
                break;
            }
            self.trace.instr_count += 1;
            let frame = stack.last_mut().unwrap();
            let func = program.func(frame.func);
            let block = func.block(frame.block);
            let here = BlockRef::new(frame.func, frame.block);

            if frame.ip < block.instrs.len() {
                let ip = frame.ip;
                frame.ip += 1;
                let instr = &block.instrs[ip];
                if let Some(label) = self.labels.live_at(here.func, here.block, ip) {
                    let ops: Vec<Val<H::Sym>> = label.condition.operands().iter().map(|o| read(frame, *o)).collect();
                    let vals: Vec<u64> = ops.iter().map(|v| v.conc).collect();
                    let violated = label.condition.holds(&vals);
                    self.trace.labels_reached.insert(label.id);
                    if violated && !self.trace.violated(label.id) {
                        self.trace.violations.push(Violation { label: label.id, operands: vals });
                    }
                    let step = self.trace.block_seq.len() - 1;
                    self.hooks.label(label, &ops, violated, step);
                }
                match &instr.op {
                    Op::Call { callee, args } => {
                        let args = args.iter().map(|a| read(frame, *a)).collect();
                        let callee = *callee;
                        if !self.push_call(&mut stack, callee, args, instr.dest) {
                            break 'exec;
                        }
                    }
                    Op::ICall { index, args } => {
                        let idx = read(frame, *index);
                        let iw = operand_width(func, *index, Width::W32);
                        self.hooks.concretize(&idx, iw);
                        let args: Vec<_> = args.iter().map(|a| read(frame, *a)).collect();
                        match program.table.get(idx.conc as usize) {
                            Some(&callee) => {
                                if !self.push_call(&mut stack, callee, args, instr.dest) {
                                    break 'exec;
                                }
                            }
                            None => {
                                self.trace.icall_faults.push(IcallFault {
                                    site: Site { func: here.func, block: here.block, index: ip as u32 },
                                    index: idx.conc,
                                });
                                if let Some(d) = instr.dest {
                                    frame.regs[d as usize] = Val::default();
                                }
                            }
                        }
                    }
                    _ => self.step(frame, instr),
                }
                continue;
            }

            match &block.term {
                Terminator::Jmp(to) => {
                    frame.block = *to;
                    frame.ip = 0;
                    self.enter(BlockRef::new(here.func, *to));
                }
                Terminator::Br { cond, then_to, else_to } => {
                    let c = frame.regs[*cond as usize].clone();
                    let taken = c.conc & 1 == 1;
                    let step = self.trace.block_seq.len() - 1;
                    self.hooks.branch(here, &c, taken, step);
                    self.trace.branches.insert((here, taken));
                    let to = if taken { *then_to } else { *else_to };
                    frame.block = to;
                    frame.ip = 0;
                    self.enter(BlockRef::new(here.func, to));
                }
                Terminator::Ret(v) => {
                    let value = v.map(|o| read(frame, o)).unwrap_or_default();
                    let done = stack.pop().unwrap();
                    match stack.last_mut() {
                        None => {
                            self.trace.ret_code = value.conc;
                            break;
                        }
                        Some(caller) => {
                            if let Some(d) = done.ret_dest {
                                caller.regs[d as usize] = value;
                            }
                            let back = BlockRef::new(caller.func, caller.block);
                            self.enter(back);
                        }
                    }
                }
            }
        }
        self.trace
    }

    fn push_call(&mut self, stack: &mut Vec<Frame<H::Sym>>, callee: FuncId, args: Vec<Val<H::Sym>>, dest: Option<RegId>) -> bool {
        if stack.len() >= self.cfg.max_call_depth as usize {
            self.trace.status = ExitStatus::CallDepthExceeded;
            return false;
        }
        let frame = self.new_frame(callee, args, dest);
        let entry = BlockRef::new(callee, frame.block);
        stack.push(frame);
        self.enter(entry);
        true
    }

    fn step(&mut self, frame: &mut Frame<H::Sym>, instr: &Instr) {
        let w = instr.width;
        let func = self.program.func(frame.func);
        let result: Val<H::Sym> = match &instr.op {
            Op::Const(c) => Val::concrete(*c),
            Op::Input { offset, bytes } => {
                let mut v = 0u64;
                for k in (0..*bytes as usize).rev() {
                    v = (v << 8) | self.input[*offset as usize + k] as u64;
                }
                Val { conc: v, sym: self.hooks.input(*offset, *bytes) }
            }
            Op::Bin { op, lhs, rhs } => {
                let (a, b) = (read(frame, *lhs), read(frame, *rhs));
                let r = eval_bin(*op, w, a.conc, b.conc);
                let sym = self.hooks.bin(*op, w, &a, &b, r);
                Val { conc: r, sym }
            }
            Op::Cast { op, src, from } => {
                let a = frame.regs[*src as usize].clone();
                let r = eval_cast(*op, *from, w, a.conc);
                let sym = self.hooks.cast(*op, *from, w, &a, r);
                Val { conc: r, sym }
            }
            Op::Cmp { pred, lhs, rhs, width } => {
                let (a, b) = (read(frame, *lhs), read(frame, *rhs));
                let r = pred.eval(*width, a.conc, b.conc);
                let sym = self.hooks.cmp(*pred, *width, &a, &b, r);
                Val { conc: r as u64, sym }
            }
            Op::ArrAlloc { len } => {
                frame.arrays.push(vec![Val::default(); *len as usize]);
                Val::concrete((frame.arrays.len() - 1) as u64)
            }
            Op::ArrLoad { arr, index } => {
                let idx = read(frame, *index);
                self.hooks.concretize(&idx, operand_width(func, *index, Width::W32));
                let handle = frame.regs[*arr as usize].conc as usize;
                frame.arrays[handle].get(idx.conc as usize).cloned().unwrap_or_default()
            }
            Op::ArrStore { arr, index, value } => {
                let idx = read(frame, *index);
                self.hooks.concretize(&idx, operand_width(func, *index, Width::W32));
                let v = read(frame, *value);
                let handle = frame.regs[*arr as usize].conc as usize;
                if let Some(slot) = frame.arrays[handle].get_mut(idx.conc as usize) {
                    *slot = v;
                }
                return;
            }
            Op::Call { .. } | Op::ICall { .. } => unreachable!("calls are handled by the dispatch loop"),
        };
        if let Some(d) = instr.dest {
            frame.regs[d as usize] = result;
        }
    }
}

#[inline]
fn read<S: Clone + Default>(frame: &Frame<S>, o: Operand) -> Val<S> {
    match o {
        Operand::Reg(r) => frame.regs[r as usize].clone(),
        Operand::Imm(v) => Val::concrete(v),
    }
}

fn operand_width(func: &crate::ir::Function, o: Operand, imm: Width) -> Width {
    match o {
        Operand::Reg(r) => func.reg_width(r),
        Operand::Imm(_) => imm,
    }
}

/// Wrapping semantics of binary operations on `w`-bit values.
pub fn eval_bin(op: BinOp, w: Width, a: u64, b: u64) -> u64 {
    let m = w.mask();
    let (a, b) = (a & m, b & m);
    let shift = (b & (w.bits() as u64 - 1)) as u32;
    let r = match op {
        BinOp::Arith(ArithOp::Add, _) => a.wrapping_add(b),
        BinOp::Arith(ArithOp::Sub, _) => a.wrapping_sub(b),
        BinOp::Arith(ArithOp::Mul, _) => a.wrapping_mul(b),
        BinOp::Arith(_, _) if b == 0 => 0,
        BinOp::Arith(ArithOp::Div, Signedness::Unsigned) => a / b,
        BinOp::Arith(ArithOp::Rem, Signedness::Unsigned) => a % b,
        BinOp::Arith(ArithOp::Div, Signedness::Signed) => w.to_signed(a).wrapping_div(w.to_signed(b)) as u64,
        BinOp::Arith(ArithOp::Rem, Signedness::Signed) => w.to_signed(a).wrapping_rem(w.to_signed(b)) as u64,
        BinOp::Shl => a << shift,
        BinOp::LShr => a >> shift,
        BinOp::AShr => (w.to_signed(a) >> shift) as u64,
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
    };
    r & m
}

pub fn eval_cast(op: CastOp, from: Width, to: Width, a: u64) -> u64 {
    match op {
        CastOp::Zext => a & from.mask(),
        CastOp::Sext => from.to_signed(a) as u64 & to.mask(),
        CastOp::Trunc => a & to.mask(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::labels::place_labels;

    fn run(src: &str, input: &[u8]) -> (Program, LabelSet, ExecTrace) {
        let p = parse_program(src).unwrap();
        let l = place_labels(&p);
        let t = run_concrete(&p, &l, input, &ExecConfig::default());
        (p, l, t)
    }

    #[test]
    fn objdump_size_plus_one_overflows() {
        let src = "inputlen 4 func main(entry=b0) { b0: size = in.u32 0  n = add.u32 size, 1  ret }";
        let (_, _, t) = run(src, &[0xFF, 0xFF, 0xFF, 0xFF]);
        assert_eq!(t.violations, vec![Violation { label: 1, operands: vec![0xFFFF_FFFF, 1] }]);
        let (_, _, t) = run(src, &[0xFE, 0xFF, 0xFF, 0xFF]);
        assert!(t.violations.is_empty());
        assert!(t.labels_reached.contains(&1));
    }

    #[test]
    fn oob_load_yields_zero_and_continues() {
        let src = "inputlen 1 func main(entry=b0) -> u32 { b0: a = arr.alloc.u32 4  arr.store a, 0, 9  x = in.u8 0  i = zext.u32 x  v = arr.load a, i  w = add.u32 v, 5  ret w }";
        let (_, _, t) = run(src, &[7]);
        assert_eq!(t.ret_code, 5);
        assert_eq!(t.status, ExitStatus::Returned);
        // store at 0 is label 1, load is label 2, add is label 3
        assert_eq!(t.violations.iter().map(|v| v.label).collect::<Vec<_>>(), vec![2]);
        assert!(t.labels_reached.contains(&3));
        let (_, _, t) = run(src, &[0]);
        assert_eq!(t.ret_code, 14);
    }

    #[test]
    fn input_independent_program_ignores_input() {
        let src = "inputlen 4 func main(entry=b0) -> u8 { b0: x = const.u8 200  y = add.u8 x, 100  c = cmp.ult y, 50  br c, b1, b2  b1: ret y  b2: ret 0 }";
        let (_, _, a) = run(src, &[]);
        let (_, _, b) = run(src, &[1, 2, 3, 4]);
        assert_eq!(a, b);
        assert_eq!(a.ret_code, 44);
    }

    #[test]
    fn shifts_mask_the_amount_and_flag_it() {
        let src = "inputlen 1 func main(entry=b0) -> u8 { b0: s = in.u8 0  v = shl.8 1, s  ret v }";
        let (_, _, t) = run(src, &[9]);
        assert_eq!(t.ret_code, 2);
        assert_eq!(t.violations.len(), 1);
    }

    #[test]
    fn division_by_zero_is_zero_and_unlabeled() {
        let src = "inputlen 1 func main(entry=b0) -> u8 { b0: d = in.u8 0  v = div.s8 7, d  ret v }";
        let (_, _, t) = run(src, &[0]);
        assert_eq!(t.ret_code, 0);
        assert!(t.violations.is_empty());
        let (_, _, t) = run("inputlen 1 func main(entry=b0) -> u8 { b0: d = in.u8 0  v = div.s8 -128, d  ret v }", &[0xFF]);
        assert_eq!(t.ret_code, 0x80);
        assert_eq!(t.violations.len(), 1);
    }

    #[test]
    fn calls_record_entry_and_return_edges() {
        let src = "func f(a:u8, entry=e) -> u8 { e: r = add.u8 a, 1  ret r }
                   func main(entry=b0) -> u8 { b0: x = const.u8 1  y = call f, x  jmp b1  b1: ret y }";
        let (_, _, t) = run(src, &[]);
        assert_eq!(t.ret_code, 2);
        let seq: Vec<_> = t.block_seq.iter().map(|b| (b.func, b.block)).collect();
        assert_eq!(seq, vec![(1, 0), (0, 0), (1, 0), (1, 1)]);
        assert_eq!(t.edge_hits.values().sum::<u32>() as usize, t.block_seq.len() - 1);
    }

    #[test]
    fn icall_out_of_table_is_skipped() {
        let src = "table f
                   func f(entry=e) -> u8 { e: ret 7 }
                   func main(entry=b0) -> u8 { b0: i = in.u8 0  v = icall i  ret v }";
        let (_, _, t) = run(src, &[0]);
        assert_eq!(t.ret_code, 7);
        let (_, _, t) = run(src, &[3]);
        assert_eq!(t.ret_code, 0);
        assert_eq!(t.icall_faults.len(), 1);
        assert_eq!(t.icall_faults[0].index, 3);
    }

    #[test]
    fn budget_and_depth_limits_stop_cleanly() {
        let spin = "func main(entry=b0) { b0: jmp b0 }";
        let p = parse_program(spin).unwrap();
        let t = run_concrete(&p, &LabelSet::empty(&p), &[], &ExecConfig { budget: 100, max_call_depth: 4 });
        assert_eq!(t.status, ExitStatus::BudgetExhausted);
        assert_eq!(t.instr_count, 100);
        let rec = "func f(entry=e) { e: call f  ret } func main(entry=b0) { b0: call f  ret }";
        let p = parse_program(rec).unwrap();
        let t = run_concrete(&p, &LabelSet::empty(&p), &[], &ExecConfig { budget: 1000, max_call_depth: 4 });
        assert_eq!(t.status, ExitStatus::CallDepthExceeded);
    }
}
