//! Immediate dominators (Cooper, Harvey and Kennedy's iterative scheme).

use std::collections::BTreeMap;

use crate::ir::{reverse_postorder, BlockId, Function};

/// Maps every block reachable from the entry to its immediate dominator.
/// The entry maps to itself; unreachable blocks are absent.
pub fn immediate_dominators(f: &Function) -> BTreeMap<BlockId, BlockId> {
    let order = reverse_postorder(f);
    let mut rpo_index = vec![usize::MAX; f.blocks.len()];
    for (i, &b) in order.iter().enumerate() {
        rpo_index[b as usize] = i;
    }
    let preds = f.predecessors();
    let mut idom: Vec<Option<BlockId>> = vec![None; f.blocks.len()];
    idom[f.entry as usize] = Some(f.entry);

    let intersect = |idom: &[Option<BlockId>], mut a: BlockId, mut b: BlockId| {
        while a != b {
            while rpo_index[a as usize] > rpo_index[b as usize] {
                a = idom[a as usize].unwrap();
            }
            while rpo_index[b as usize] > rpo_index[a as usize] {
                b = idom[b as usize].unwrap();
            }
        }
        a
    };

    let mut changed = true;
    while changed {
        changed = false;
        for &b in order.iter().skip(1) {
            let mut new = None;
            for &p in &preds[b as usize] {
                if idom[p as usize].is_none() {
                    continue;
                }
                new = Some(match new {
                    None => p,
                    Some(n) => intersect(&idom, p, n),
                });
            }
            if new.is_some() && idom[b as usize] != new {
                idom[b as usize] = new;
                changed = true;
            }
        }
    }
    idom.iter()
        .enumerate()
        .filter_map(|(b, d)| d.map(|d| (b as BlockId, d)))
        .collect()
}

/// Whether `a` dominates `b` under the given tree (reflexive).
pub fn dominates(idom: &BTreeMap<BlockId, BlockId>, a: BlockId, mut b: BlockId) -> bool {
    loop {
        if a == b {
            return true;
        }
        match idom.get(&b) {
            Some(&d) if d != b => b = d,
            _ => return false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn idoms(src: &str) -> Vec<(u32, u32)> {
        let p = parse_program(src).unwrap();
        immediate_dominators(&p.functions[0]).into_iter().collect()
    }

    #[test]
    fn chain() {
        assert_eq!(idoms("func main(entry=b0) { b0: jmp b1 b1: jmp b2 b2: ret }"), vec![(0, 0), (1, 0), (2, 1)]);
    }

    #[test]
    fn diamond() {
        let src = "inputlen 1 func main(entry=b0) { b0: x = in.u8 0 c = cmp.eq x, 1 br c, b1, b2 b1: jmp b3 b2: jmp b3 b3: ret }";
        assert_eq!(idoms(src), vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn loop_and_unreachable_block() {
        let src = "inputlen 1 func main(entry=b0) { b0: jmp b1 b1: x = in.u8 0 c = cmp.eq x, 1 br c, b2, b3 b2: jmp b1 b3: ret b4: jmp b3 }";
        let p = parse_program(src).unwrap();
        let d = immediate_dominators(&p.functions[0]);
        assert_eq!(d.get(&2), Some(&1));
        assert_eq!(d.get(&3), Some(&1));
        assert_eq!(d.get(&4), None);
        assert!(dominates(&d, 0, 3) && !dominates(&d, 2, 3));
    }
}
