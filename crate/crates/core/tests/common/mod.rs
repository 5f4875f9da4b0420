//! Program generators and brute-force oracles shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use hfl::concolic::{ConcolicConfig, ConcolicEngine, PathEntry, TestKind};
use hfl::fuzz::CoverageMap;
use hfl::interp::{run_concrete, ExecConfig};
use hfl::ir::{BlockRef, Program, Terminator};
use hfl::labels::{LabelId, LabelSet};
use num_bigint::BigInt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random program shaped to exercise trimming: a guard comparing an input
/// value (possibly cast, possibly against a constant register) with a
/// boundary constant, dominating blocks with labels over that value.
pub fn trim_program(seed: u64, input_len: u32) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b0 = Vec::new();
    for k in 0..input_len {
        b0.push(format!("v{k} = in.u8 {k}"));
    }
    // guard value and its width
    let (g, w) = match rng.gen_range(0..5) {
        0 if input_len >= 2 => {
            b0.push("x = in.u16 0".into());
            ("x".to_string(), 16)
        }
        1 => {
            b0.push("gz = zext.u16 v0".into());
            ("gz".to_string(), 16)
        }
        2 => {
            b0.push("gs = sext.u32 v0".into());
            ("gs".to_string(), 32)
        }
        _ => (format!("v{}", rng.gen_range(0..input_len)), 8),
    };
    let boundaries: [u64; 14] = [0, 1, 2, 7, 8, 15, 16, 31, 32, 100, 127, 128, 200, 255];
    let k = if rng.gen_bool(0.8) { *boundaries.choose(&mut rng).unwrap() } else { rng.gen_range(0..256) };
    let k_operand = if rng.gen_bool(0.3) {
        b0.push(format!("kc = const.u{w} {k}"));
        "kc".to_string()
    } else {
        k.to_string()
    };
    let pred = ["eq", "ne", "ult", "ule", "slt", "sle"].choose(&mut rng).unwrap();
    let (l, r) = if rng.gen_bool(0.5) { (g.clone(), k_operand) } else { (k_operand, g.clone()) };
    b0.push(format!("c = cmp.{pred} {l}, {r}"));
    let labeled_then = rng.gen_bool(0.5);
    let shared = rng.gen_bool(0.15);

    let mut lb = Vec::new();
    // value the label uses
    let mut t = g.clone();
    let mut tw = w;
    match rng.gen_range(0..10) {
        0 => lb.push(format!("{g} = {}", redefinition(&g, w, input_len, &mut rng))),
        1 if w == 8 => {
            lb.push(format!("e = zext.u32 {g}"));
            t = "e".into();
            tw = 32;
        }
        2 if w == 8 => {
            lb.push(format!("e = sext.u16 {g}"));
            t = "e".into();
            tw = 16;
        }
        3 if w > 8 => {
            lb.push(format!("e = trunc.u8 {g}"));
            t = "e".into();
            tw = 8;
        }
        4 => {
            t = format!("v{}", rng.gen_range(0..input_len));
            tw = 8;
        }
        _ => {}
    }
    for _ in 0..rng.gen_range(1..=2) {
        lb.push(labeled_op(&t, tw, &mut rng));
    }

    let (then_b, else_b) = if labeled_then { ("bl", "bo") } else { ("bo", "bl") };
    let mut text = format!("inputlen {input_len}\nfunc main(entry=b0) {{\nb0: {}\n  br c, {then_b}, {else_b}\n", b0.join("\n  "));
    text.push_str(&format!("bl: {}\n  jmp bj\n", lb.join("\n  ")));
    if shared {
        text.push_str("bo: jmp bl\n");
    } else {
        text.push_str("bo: jmp bj\n");
    }
    text.push_str("bj: ret\n}\n");
    text
}

fn redefinition(g: &str, w: u32, input_len: u32, rng: &mut ChaCha8Rng) -> String {
    let v = format!("v{}", rng.gen_range(0..input_len));
    match (w, rng.gen_bool(0.5)) {
        (8, true) => format!("xor.u8 {g}, {v}"),
        (8, false) => format!("in.u8 {}", rng.gen_range(0..input_len)),
        (w, _) => format!("add.u{w} {g}, 1"),
    }
}

fn labeled_op(t: &str, w: u32, rng: &mut ChaCha8Rng) -> String {
    let id: u32 = rng.gen();
    let c = rng.gen_range(0..=(1u64 << w.min(16)) - 1);
    match rng.gen_range(0..6) {
        0 => format!("y{id} = add.u{w} {t}, {c}"),
        1 => format!("y{id} = add.s{w} {t}, {c}"),
        2 => format!("y{id} = sub.u{w} {t}, {c}"),
        3 => format!("y{id} = sub.s{w} {c}, {t}"),
        4 => format!("y{id} = shl.u{w} {c}, {t}"),
        _ if w == 32 => format!("a{id} = arr.alloc.u8 {}\n  y{id} = arr.load a{id}, {t}", rng.gen_range(1..=256)),
        _ => format!("y{id} = mul.s{w} {t}, {}", rng.gen_range(2..=5)),
    }
}

/// All inputs of `len` bytes, in little-endian counting order.
pub fn all_inputs(len: u32) -> impl Iterator<Item = Vec<u8>> {
    (0u32..1 << (8 * len)).map(move |i| i.to_le_bytes()[..len as usize].to_vec())
}

/// Labels violated by at least one input of the program's full input space.
pub fn triggerable(p: &Program, labels: &LabelSet, of_interest: &BTreeSet<LabelId>) -> BTreeSet<LabelId> {
    let mut hit = BTreeSet::new();
    for input in all_inputs(p.input_len) {
        let t = run_concrete(p, labels, &input, &ExecConfig::default());
        for v in &t.violations {
            if of_interest.contains(&v.label) {
                hit.insert(v.label);
            }
        }
        if hit.len() == of_interest.len() {
            break;
        }
    }
    hit
}

/// Random single-function CFG of `n` blocks; some blocks host one or two
/// labels. Unreachable blocks and self loops are allowed.
pub fn graph_program(seed: u64, n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("inputlen 1\nfunc main(entry=b0) {\n");
    for b in 0..n {
        text.push_str(&format!("b{b}:"));
        for j in 0..[0, 0, 1, 2][rng.gen_range(0..4)] {
            text.push_str(&format!(" x{b}_{j} = in.u8 0  y{b}_{j} = add.u8 x{b}_{j}, {j}"));
        }
        let target = |rng: &mut ChaCha8Rng| rng.gen_range(0..n);
        match rng.gen_range(0..10) {
            0 => text.push_str(" ret\n"),
            1..=3 => text.push_str(&format!(" jmp b{}\n", target(&mut rng))),
            _ => {
                let (t, e) = (target(&mut rng), target(&mut rng));
                text.push_str(&format!(" t{b} = in.u8 0  c{b} = cmp.ult t{b}, 7  br c{b}, b{t}, b{e}\n"));
            }
        }
    }
    text.push_str("}\n");
    text
}

/// Successor lists of function 0, read straight from the terminators.
pub fn successors(p: &Program) -> Vec<Vec<usize>> {
    let f = p.func(0);
    (0..f.blocks.len())
        .map(|b| match *p.terminator(BlockRef::new(0, b as u32)) {
            Terminator::Jmp(t) => vec![t as usize],
            Terminator::Br { then_to, else_to, .. } => vec![then_to as usize, else_to as usize],
            Terminator::Ret(_) => vec![],
        })
        .collect()
}

/// Blocks reachable from the successors of `from` (so `from` is included
/// only when it lies on a cycle), skipping `removed`.
pub fn bfs(succ: &[Vec<usize>], from: usize, removed: Option<usize>) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut q: VecDeque<usize> = succ[from].iter().copied().collect();
    while let Some(b) = q.pop_front() {
        if Some(b) == removed || !seen.insert(b) {
            continue;
        }
        q.extend(succ[b].iter().copied());
    }
    seen
}

/// Per-block reach counts of labels, by breadth-first search.
pub fn bfs_reach(p: &Program, labels: &LabelSet) -> BTreeMap<usize, usize> {
    let succ = successors(p);
    let mut hosted: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels.live() {
        *hosted.entry(l.site.block as usize).or_default() += 1;
    }
    (0..succ.len()).map(|b| (b, bfs(&succ, b, None).iter().map(|x| hosted.get(x).copied().unwrap_or(0)).sum())).collect()
}

/// Branch arms recorded in a path condition, in order.
pub fn branch_arms(path: &[PathEntry]) -> Vec<(BlockRef, bool)> {
    path.iter()
        .filter_map(|e| match e {
            PathEntry::Branch { site, taken, .. } => Some((*site, *taken)),
            PathEntry::Pin(_) => None,
        })
        .collect()
}

/// Runs the engine on `seed` with nothing covered, replays every flip test
/// and returns (flip tests, tests that kept the prefix and took the flipped arm).
pub fn flip_fidelity(p: &Program, labels: &LabelSet, seed: &[u8], exec: ExecConfig) -> (usize, usize) {
    let cfg = ConcolicConfig { exec, query_cost: 1, ..Default::default() };
    let mut engine = ConcolicEngine::new(p, labels, cfg);
    // tracing only: no query fits the budget
    let mut tracer = ConcolicEngine::new(p, labels, ConcolicConfig { query_cost: u64::MAX / 2, ..cfg });
    let out = engine.run(seed, &CoverageMap::new(), &BTreeSet::new(), 1 << 20);
    let path = engine.path_condition().to_vec();
    let (mut total, mut ok) = (0, 0);
    for t in &out.tests {
        let TestKind::Flip(_) = t.kind else { continue };
        total += 1;
        let prefix = branch_arms(&path[..t.depth]);
        let PathEntry::Branch { site, taken, .. } = &path[t.depth] else { panic!("flip of a pin") };
        tracer.run(&t.bytes, &CoverageMap::new(), &BTreeSet::new(), 1 << 20);
        let replay = branch_arms(tracer.path_condition());
        if replay.len() > prefix.len() && replay[..prefix.len()] == prefix[..] && replay[prefix.len()] == (*site, !taken) {
            ok += 1;
        }
    }
    (total, ok)
}

/// `e^(-S/20) * L` with 60 fractional decimal digits, by Taylor series of
/// `e^(1/20)` raised to `S`.
pub fn oracle_weight(l: u64, s: u32) -> f64 {
    let scale = BigInt::from(10).pow(60);
    // e^(1/20) = sum (1/20)^k / k!
    let mut term = scale.clone();
    let mut e = BigInt::from(0);
    for k in 1..60u32 {
        e += &term;
        term /= BigInt::from(20) * BigInt::from(k);
    }
    let mut pow = scale.clone();
    for _ in 0..s {
        pow = pow * &e / &scale;
    }
    // L / e^(S/20), then back to f64 via a 30-digit quotient
    let q = BigInt::from(l) * &scale * BigInt::from(10).pow(30) / pow;
    let digits: f64 = q.to_string().parse().unwrap();
    digits / 1e30
}
