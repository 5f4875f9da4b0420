//! Solver answers against enumeration of every two-byte assignment.

use hfl::concolic::expr::{bin, byte, cast, cmp, input, konst, not, ExprRef, Tape};
use hfl::concolic::solver::{solve, SolveStatus, SolverConfig};
use hfl::ir::{ArithOp, BinOp, CastOp, CmpPred, Signedness};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn term(rng: &mut ChaCha8Rng, w: u32, depth: u32) -> ExprRef {
    if depth == 0 || rng.gen_bool(0.3) {
        return match (w, rng.gen_range(0..3)) {
            (8, 0) => byte(rng.gen_range(0..2)),
            (16, 0) => input(0, 2),
            (w, 1) => cast(CastOp::Zext, byte(rng.gen_range(0..2)), w),
            (w, _) => konst(w, rng.gen::<u128>() & ((1u128 << w) - 1)),
        };
    }
    if w == 8 && rng.gen_bool(0.2) {
        return cast(CastOp::Trunc, term(rng, 16, depth - 1), 8);
    }
    let s = if rng.gen() { Signedness::Signed } else { Signedness::Unsigned };
    let op = *[
        BinOp::Arith(ArithOp::Add, s),
        BinOp::Arith(ArithOp::Sub, s),
        BinOp::Arith(ArithOp::Mul, s),
        BinOp::Arith(ArithOp::Div, Signedness::Unsigned),
        BinOp::Arith(ArithOp::Rem, Signedness::Unsigned),
        BinOp::Shl,
        BinOp::LShr,
        BinOp::AShr,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
    ]
    .choose(rng)
    .unwrap();
    bin(op, term(rng, w, depth - 1), term(rng, w, depth - 1))
}

fn constraint(rng: &mut ChaCha8Rng) -> ExprRef {
    let w = [8, 16][rng.gen_range(0..2)];
    let pred = *[CmpPred::Eq, CmpPred::Ne, CmpPred::Ult, CmpPred::Ule, CmpPred::Slt, CmpPred::Sle].choose(rng).unwrap();
    let c = cmp(pred, term(rng, w, 2), term(rng, w, 2));
    if rng.gen_bool(0.3) {
        not(c)
    } else {
        c
    }
}

#[test]
fn two_byte_constraints_are_decided_exactly() {
    let cfg = SolverConfig::default();
    let (mut sat, mut unsat) = (0, 0);
    for seed in 0..150u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs: Vec<ExprRef> = (0..rng.gen_range(1..=3)).map(|_| constraint(&mut rng)).collect();
        let tape = Tape::new(&cs);
        let mut vals = Vec::new();
        let models: Vec<[u8; 2]> = (0..=u16::MAX).map(u16::to_le_bytes).filter(|b| tape.all_true(b, &mut vals)).collect();
        let hint = [rng.gen(), rng.gen()];
        let r = solve(&cs, &hint, &cfg);
        match &r.status {
            SolveStatus::Sat(_) => {
                let w = r.apply(&hint).unwrap();
                assert!(cs.iter().all(|c| c.eval(&w) == 1), "seed {seed}: witness {w:?} fails");
                sat += 1;
            }
            SolveStatus::Unsat => {
                assert!(models.is_empty(), "seed {seed}: unsat but {:?} satisfies", models[0]);
                unsat += 1;
            }
            SolveStatus::Unknown => panic!("seed {seed}: unknown on a two-byte problem"),
        }
        if !models.is_empty() {
            assert!(r.is_sat(), "seed {seed}: satisfiable but not found");
        }
    }
    assert!(sat > 15 && unsat > 15, "sat {sat} unsat {unsat}");
}
