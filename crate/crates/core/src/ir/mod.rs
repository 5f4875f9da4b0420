//! The miniature IR: fixed-width integer registers, fixed-size arrays, input
//! reads at constant offsets, direct and table-indexed calls.

mod parse;

use std::fmt;

pub use parse::parse_program;
pub(crate) use parse::reverse_postorder;

pub type FuncId = u32;
pub type BlockId = u32;
pub type RegId = u32;

/// Bit width of an integer value. Booleans are width 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Width(u8);

impl Width {
    pub const B1: Width = Width(1);
    pub const W8: Width = Width(8);
    pub const W16: Width = Width(16);
    pub const W32: Width = Width(32);
    pub const W64: Width = Width(64);

    pub fn new(bits: u32) -> Option<Width> {
        match bits {
            1 | 8 | 16 | 32 | 64 => Some(Width(bits as u8)),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        self.0 as u32
    }

    pub fn mask(self) -> u64 {
        if self.0 == 64 {
            u64::MAX
        } else {
            (1u64 << self.0) - 1
        }
    }

    pub fn sign_bit(self) -> u64 {
        1u64 << (self.0 - 1)
    }

    /// Interprets the low `bits` of `v` as a two's-complement integer.
    pub fn to_signed(self, v: u64) -> i64 {
        let v = v & self.mask();
        if self.0 == 64 {
            v as i64
        } else if v & self.sign_bit() != 0 {
            (v | !self.mask()) as i64
        } else {
            v as i64
        }
    }

    pub fn signed_min(self) -> i64 {
        self.to_signed(self.sign_bit())
    }

    pub fn signed_max(self) -> i64 {
        (self.sign_bit() - 1) as i64
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Signedness {
    Signed,
    Unsigned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Arith(ArithOp, Signedness),
    Shl,
    LShr,
    AShr,
    And,
    Or,
    Xor,
}

impl BinOp {
    pub fn is_shift(self) -> bool {
        matches!(self, BinOp::Shl | BinOp::LShr | BinOp::AShr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CastOp {
    Zext,
    Sext,
    Trunc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpPred {
    Eq,
    Ne,
    Slt,
    Sle,
    Ult,
    Ule,
}

impl CmpPred {
    pub fn eval(self, width: Width, a: u64, b: u64) -> bool {
        let (a, b) = (a & width.mask(), b & width.mask());
        match self {
            CmpPred::Eq => a == b,
            CmpPred::Ne => a != b,
            CmpPred::Ult => a < b,
            CmpPred::Ule => a <= b,
            CmpPred::Slt => width.to_signed(a) < width.to_signed(b),
            CmpPred::Sle => width.to_signed(a) <= width.to_signed(b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(RegId),
    /// Already reduced to the width of its use site.
    Imm(u64),
}

impl Operand {
    pub fn reg(self) -> Option<RegId> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Const(u64),
    /// Little-endian read of `bytes` input bytes starting at `offset`.
    Input { offset: u32, bytes: u8 },
    Bin { op: BinOp, lhs: Operand, rhs: Operand },
    Cast { op: CastOp, src: RegId, from: Width },
    Cmp { pred: CmpPred, lhs: Operand, rhs: Operand, width: Width },
    ArrAlloc { len: u32 },
    ArrLoad { arr: RegId, index: Operand },
    ArrStore { arr: RegId, index: Operand, value: Operand },
    Call { callee: FuncId, args: Vec<Operand> },
    ICall { index: Operand, args: Vec<Operand> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instr {
    pub dest: Option<RegId>,
    /// Result width; element width for array operations; unused for calls
    /// without a destination.
    pub width: Width,
    pub op: Op,
    pub line: u32,
}

impl Instr {
    /// Registers read by this instruction, in operand order.
    pub fn uses(&self) -> Vec<RegId> {
        let mut out = Vec::new();
        let mut push = |o: &Operand| {
            if let Operand::Reg(r) = o {
                out.push(*r)
            }
        };
        match &self.op {
            Op::Const(_) | Op::Input { .. } | Op::ArrAlloc { .. } => {}
            Op::Bin { lhs, rhs, .. } | Op::Cmp { lhs, rhs, .. } => {
                push(lhs);
                push(rhs);
            }
            Op::Cast { src, .. } => push(&Operand::Reg(*src)),
            Op::ArrLoad { arr, index } => {
                push(&Operand::Reg(*arr));
                push(index);
            }
            Op::ArrStore { arr, index, value } => {
                push(&Operand::Reg(*arr));
                push(index);
                push(value);
            }
            Op::Call { args, .. } => args.iter().for_each(&mut push),
            Op::ICall { index, args } => {
                push(index);
                args.iter().for_each(&mut push);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Terminator {
    Jmp(BlockId),
    Br { cond: RegId, then_to: BlockId, else_to: BlockId },
    Ret(Option<Operand>),
}

impl Terminator {
    pub fn successors(&self) -> Vec<BlockId> {
        match self {
            Terminator::Jmp(b) => vec![*b],
            Terminator::Br { then_to, else_to, .. } => {
                if then_to == else_to {
                    vec![*then_to]
                } else {
                    vec![*then_to, *else_to]
                }
            }
            Terminator::Ret(_) => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub instrs: Vec<Instr>,
    pub term: Terminator,
    pub term_line: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ty {
    Int(Width),
    Array { elem: Width, len: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegInfo {
    pub name: String,
    pub ty: Ty,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<RegId>,
    pub regs: Vec<RegInfo>,
    pub blocks: Vec<Block>,
    pub entry: BlockId,
    pub ret: Option<Width>,
}

impl Function {
    pub fn block_id(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(|i| i as BlockId)
    }

    pub fn reg_id(&self, name: &str) -> Option<RegId> {
        self.regs.iter().position(|r| r.name == name).map(|i| i as RegId)
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id as usize]
    }

    pub fn reg_width(&self, r: RegId) -> Width {
        match self.regs[r as usize].ty {
            Ty::Int(w) => w,
            Ty::Array { elem, .. } => elem,
        }
    }

    /// Intra-procedural predecessor lists, indexed by block id.
    pub fn predecessors(&self) -> Vec<Vec<BlockId>> {
        let mut preds = vec![Vec::new(); self.blocks.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            for s in b.term.successors() {
                preds[s as usize].push(i as BlockId);
            }
        }
        preds
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub entry: FuncId,
    /// Functions callable through `icall`, by table index.
    pub table: Vec<FuncId>,
    pub input_len: u32,
}

impl Program {
    pub const DEFAULT_INPUT_LEN: u32 = 64;

    pub fn func(&self, id: FuncId) -> &Function {
        &self.functions[id as usize]
    }

    pub fn func_id(&self, name: &str) -> Option<FuncId> {
        self.functions.iter().position(|f| f.name == name).map(|i| i as FuncId)
    }

    pub fn block_name(&self, at: BlockRef) -> String {
        let f = self.func(at.func);
        format!("{}:{}", f.name, f.block(at.block).name)
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockRef> + '_ {
        self.functions.iter().enumerate().flat_map(|(fi, f)| {
            (0..f.blocks.len()).map(move |bi| BlockRef::new(fi as FuncId, bi as BlockId))
        })
    }

    pub fn terminator(&self, at: BlockRef) -> &Terminator {
        &self.func(at.func).block(at.block).term
    }
}

/// A basic block in a whole program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockRef {
    pub func: FuncId,
    pub block: BlockId,
}

impl BlockRef {
    pub fn new(func: FuncId, block: BlockId) -> Self {
        Self { func, block }
    }
}

/// One instruction position in a whole program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub func: FuncId,
    pub block: BlockId,
    pub index: u32,
}

impl Site {
    pub fn block_ref(self) -> BlockRef {
        BlockRef::new(self.func, self.block)
    }
}

/// A control-flow transfer between two blocks, possibly across functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: BlockRef,
    pub to: BlockRef,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("{line}:{col}: invalid program: {msg}")]
    Validation { line: u32, col: u32, msg: String },
}
