//! Interprocedural CFG with indirect-call resolution, and the per-block count
//! of live labels reachable forward from each block.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};

use crate::interp::eval_cast;
use crate::ir::{BlockRef, FuncId, Function, Op, Operand, Program, Site, Terminator};
use crate::labels::{LabelId, LabelSet};

/// Value sets larger than this collapse to "any value".
const MAX_VALUE_SET: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterCfg {
    pub nodes: Vec<BlockRef>,
    pub succs: BTreeMap<BlockRef, BTreeSet<BlockRef>>,
    /// Resolved targets of every `icall` site (always a subset of the table).
    pub icall_targets: BTreeMap<Site, BTreeSet<FuncId>>,
}

impl InterCfg {
    pub fn successors(&self, b: BlockRef) -> impl Iterator<Item = BlockRef> + '_ {
        self.succs.get(&b).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, from: BlockRef, to: BlockRef) -> bool {
        self.succs.get(&from).is_some_and(|s| s.contains(&to))
    }

    pub fn edge_count(&self) -> usize {
        self.succs.values().map(BTreeSet::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Values {
    Set(BTreeSet<u64>),
    Any,
}

impl Values {
    fn join(&mut self, other: &Values) -> bool {
        match (&mut *self, other) {
            (Values::Any, _) => false,
            (_, Values::Any) => {
                *self = Values::Any;
                true
            }
            (Values::Set(a), Values::Set(b)) => {
                let before = a.len();
                a.extend(b.iter().copied());
                if a.len() > MAX_VALUE_SET {
                    *self = Values::Any;
                    return true;
                }
                a.len() != before
            }
        }
    }
}

/// Flow-insensitive propagation of the integer values that may reach each
/// register, precise only for constants moved through casts, parameters and
/// return values. Everything else is "any value".
struct ValueSets<'p> {
    program: &'p Program,
    regs: Vec<Vec<Option<Values>>>,
    rets: Vec<Option<Values>>,
}

impl<'p> ValueSets<'p> {
    fn new(program: &'p Program) -> Self {
        Self {
            program,
            regs: program.functions.iter().map(|f| vec![None; f.regs.len()]).collect(),
            rets: vec![None; program.functions.len()],
        }
    }

    fn operand(&self, func: FuncId, o: Operand) -> Option<Values> {
        match o {
            Operand::Imm(v) => Some(Values::Set(BTreeSet::from([v]))),
            Operand::Reg(r) => self.regs[func as usize][r as usize].clone(),
        }
    }

    fn flow(slot: &mut Option<Values>, v: Option<Values>) -> bool {
        match (slot.as_mut(), v) {
            (_, None) => false,
            (None, Some(v)) => {
                *slot = Some(v);
                true
            }
            (Some(s), Some(v)) => s.join(&v),
        }
    }

    fn targets(&self, func: FuncId, index: Operand) -> BTreeSet<FuncId> {
        let table = &self.program.table;
        match self.operand(func, index) {
            None => BTreeSet::new(),
            Some(Values::Any) => table.iter().copied().collect(),
            Some(Values::Set(s)) => s.iter().filter_map(|&i| table.get(i as usize).copied()).collect(),
        }
    }

    fn callees(&self, func: FuncId, op: &Op) -> BTreeSet<FuncId> {
        match op {
            Op::Call { callee, .. } => BTreeSet::from([*callee]),
            Op::ICall { index, .. } => self.targets(func, *index),
            _ => BTreeSet::new(),
        }
    }

    fn solve(&mut self) {
        let program = self.program;
        let mut changed = true;
        while changed {
            changed = false;
            for (fi, f) in program.functions.iter().enumerate() {
                let fi = fi as FuncId;
                for b in &f.blocks {
                    for instr in &b.instrs {
                        let value = match &instr.op {
                            Op::Const(c) => Some(Values::Set(BTreeSet::from([*c]))),
                            Op::Cast { op, src, from } => match &self.regs[fi as usize][*src as usize] {
                                Some(Values::Set(s)) => {
                                    Some(Values::Set(s.iter().map(|&v| eval_cast(*op, *from, instr.width, v)).collect()))
                                }
                                other => other.clone(),
                            },
                            Op::Call { args, .. } | Op::ICall { args, .. } => {
                                // an index outside the table skips the call and yields 0
                                let mut ret = match instr.op {
                                    Op::ICall { .. } => Some(Values::Set(BTreeSet::from([0]))),
                                    _ => None,
                                };
                                for g in self.callees(fi, &instr.op) {
                                    let params = &program.func(g).params;
                                    for (p, a) in params.iter().zip(args) {
                                        let v = self.operand(fi, *a);
                                        changed |= Self::flow(&mut self.regs[g as usize][*p as usize], v);
                                    }
                                    Self::flow(&mut ret, self.rets[g as usize].clone());
                                }
                                ret
                            }
                            _ => Some(Values::Any),
                        };
                        if let Some(d) = instr.dest {
                            changed |= Self::flow(&mut self.regs[fi as usize][d as usize], value);
                        }
                    }
                    if let Terminator::Ret(Some(v)) = b.term {
                        let v = self.operand(fi, v);
                        changed |= Self::flow(&mut self.rets[fi as usize], v);
                    }
                }
            }
        }
    }
}

fn exit_blocks(f: &Function) -> impl Iterator<Item = u32> + '_ {
    f.blocks.iter().enumerate().filter(|(_, b)| matches!(b.term, Terminator::Ret(_))).map(|(i, _)| i as u32)
}

/// Builds the interprocedural CFG. Call sites get an edge to each callee's
/// entry, and each callee exit block gets an edge back to the calling block.
pub fn build_inter_cfg(program: &Program) -> InterCfg {
    let mut vs = ValueSets::new(program);
    vs.solve();

    let nodes: Vec<BlockRef> = program.blocks().collect();
    let mut succs: BTreeMap<BlockRef, BTreeSet<BlockRef>> = nodes.iter().map(|&b| (b, BTreeSet::new())).collect();
    let mut icall_targets = BTreeMap::new();
    for (fi, f) in program.functions.iter().enumerate() {
        let fi = fi as FuncId;
        for (bi, b) in f.blocks.iter().enumerate() {
            let here = BlockRef::new(fi, bi as u32);
            for s in b.term.successors() {
                succs.get_mut(&here).unwrap().insert(BlockRef::new(fi, s));
            }
            for (ii, instr) in b.instrs.iter().enumerate() {
                let callees = vs.callees(fi, &instr.op);
                if let Op::ICall { index, .. } = instr.op {
                    let site = Site { func: fi, block: bi as u32, index: ii as u32 };
                    icall_targets.insert(site, vs.targets(fi, index));
                }
                for g in callees {
                    let gf = program.func(g);
                    succs.get_mut(&here).unwrap().insert(BlockRef::new(g, gf.entry));
                    for e in exit_blocks(gf) {
                        succs.get_mut(&BlockRef::new(g, e)).unwrap().insert(here);
                    }
                }
            }
        }
    }
    InterCfg { nodes, succs, icall_targets }
}

/// Live labels reachable from each block through at least one edge.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ReachTable {
    reach: BTreeMap<BlockRef, BTreeSet<LabelId>>,
    own: BTreeMap<BlockRef, BTreeSet<LabelId>>,
}

impl ReachTable {
    pub fn count(&self, b: BlockRef) -> usize {
        self.reach.get(&b).map_or(0, BTreeSet::len)
    }

    pub fn set(&self, b: BlockRef) -> Option<&BTreeSet<LabelId>> {
        self.reach.get(&b)
    }

    /// Live labels hosted in `b` itself.
    pub fn own(&self, b: BlockRef) -> Option<&BTreeSet<LabelId>> {
        self.own.get(&b)
    }

    pub fn own_count(&self, b: BlockRef) -> usize {
        self.own.get(&b).map_or(0, BTreeSet::len)
    }

    /// Labels hosted in `b` or reachable from it, each counted once.
    pub fn count_from(&self, b: BlockRef) -> usize {
        match (self.reach.get(&b), self.own.get(&b)) {
            (Some(r), Some(o)) => r.union(o).count(),
            (r, o) => r.or(o).map_or(0, BTreeSet::len),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockRef, &BTreeSet<LabelId>)> {
        self.reach.iter().map(|(b, s)| (*b, s))
    }
}

/// Computes reach sets over the condensation of the graph, sinks first.
pub fn compute_reach(cfg: &InterCfg, labels: &LabelSet) -> ReachTable {
    let mut g: DiGraph<BlockRef, ()> = DiGraph::with_capacity(cfg.nodes.len(), cfg.edge_count());
    let mut idx: BTreeMap<BlockRef, NodeIndex> = BTreeMap::new();
    for &n in &cfg.nodes {
        idx.insert(n, g.add_node(n));
    }
    for (from, tos) in &cfg.succs {
        for to in tos {
            g.add_edge(idx[from], idx[to], ());
        }
    }
    let own: BTreeMap<BlockRef, BTreeSet<LabelId>> =
        cfg.nodes.iter().map(|&b| (b, labels.live_in_block(b.func, b.block).collect())).collect();

    // tarjan_scc yields components in reverse topological order.
    let sccs = tarjan_scc(&g);
    let mut comp_of = vec![0usize; g.node_count()];
    for (ci, c) in sccs.iter().enumerate() {
        for n in c {
            comp_of[n.index()] = ci;
        }
    }
    // `full[c]`: labels hosted in c or reachable from it.
    let mut full: Vec<BTreeSet<LabelId>> = Vec::with_capacity(sccs.len());
    let mut reach = BTreeMap::new();
    for (ci, comp) in sccs.iter().enumerate() {
        let hosted: BTreeSet<LabelId> = comp.iter().flat_map(|n| own[&g[*n]].iter().copied()).collect();
        let cyclic = comp.len() > 1 || g.contains_edge(comp[0], comp[0]);
        let mut r: BTreeSet<LabelId> = if cyclic { hosted.clone() } else { BTreeSet::new() };
        for n in comp {
            for s in g.neighbors(*n) {
                let cs = comp_of[s.index()];
                if cs != ci {
                    r.extend(full[cs].iter().copied());
                }
            }
        }
        for n in comp {
            reach.insert(g[*n], r.clone());
        }
        r.extend(hosted);
        full.push(r);
    }
    ReachTable { reach, own }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::labels::place_labels;

    // Root b0 reaches eight other blocks, three of which host a label.
    const FIGURE: &str = "
        inputlen 2
        func main(entry=b0) {
        b0: x = in.u8 0  c = cmp.ult x, 128  br c, b1, b2
        b1: d = cmp.eq x, 3  br d, b3, b4
        b2: e = cmp.eq x, 200  br e, b5, b6
        b3: y = add.u8 x, 1  jmp b7
        b4: jmp b7
        b5: z = shl.8 x, 1  jmp b8
        b6: jmp b8
        b7: jmp b8
        b8: w = mul.u8 x, 3  ret
        }";

    #[test]
    fn figure_root_reaches_three_labels() {
        let p = parse_program(FIGURE).unwrap();
        let t = compute_reach(&build_inter_cfg(&p), &place_labels(&p));
        let b = |i| BlockRef::new(0, i);
        assert_eq!(t.count(b(0)), 3);
        assert_eq!(t.count(b(8)), 0);
        assert_eq!(t.count(b(3)), 1);
        assert_eq!(t.own_count(b(3)), 1);
    }

    #[test]
    fn direct_calls_only() {
        let src = "func f(entry=e) { e: ret } func main(entry=b0) { b0: call f  ret }";
        let p = parse_program(src).unwrap();
        let cfg = build_inter_cfg(&p);
        assert!(cfg.icall_targets.is_empty());
        assert!(cfg.has_edge(BlockRef::new(1, 0), BlockRef::new(0, 0)));
        assert!(cfg.has_edge(BlockRef::new(0, 0), BlockRef::new(1, 0)));
        assert_eq!(cfg.edge_count(), 2);
    }

    #[test]
    fn constant_index_resolves_to_one_target() {
        let src = "table f, g, h
                   func f(entry=e) { e: ret } func g(entry=e) { e: ret } func h(entry=e) { e: ret }
                   func main(entry=b0) { b0: v = const.u32 2  icall v  ret }";
        let p = parse_program(src).unwrap();
        let cfg = build_inter_cfg(&p);
        assert_eq!(cfg.icall_targets.values().next().unwrap(), &BTreeSet::from([2]));
    }

    #[test]
    fn constant_index_through_parameter_and_return() {
        let src = "table f, g
                   func f(entry=e) { e: ret } func g(entry=e) { e: ret }
                   func pick(entry=e) -> u8 { e: ret 1 }
                   func go(i:u8, entry=e) { e: icall i  ret }
                   func main(entry=b0) { b0: v = call pick  call go, v  ret }";
        let p = parse_program(src).unwrap();
        let cfg = build_inter_cfg(&p);
        assert_eq!(cfg.icall_targets.values().next().unwrap(), &BTreeSet::from([1]));
    }

    #[test]
    fn input_index_resolves_to_whole_table() {
        let src = "inputlen 1 table f, g
                   func f(entry=e) { e: ret } func g(entry=e) { e: ret }
                   func main(entry=b0) { b0: v = in.u8 0  icall v  ret }";
        let p = parse_program(src).unwrap();
        let cfg = build_inter_cfg(&p);
        assert_eq!(cfg.icall_targets.values().next().unwrap(), &BTreeSet::from([0, 1]));
    }
}
