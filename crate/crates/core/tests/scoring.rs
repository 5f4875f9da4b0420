//! Seed scores against a fixed-point evaluation of the decay weight, plus
//! scheduler ordering.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use hfl::coordinator::{score_formula, score_seed, select_for_concolic, AttemptLedger, Policy, DEFAULT_DECAY};
use hfl::fuzz::{Branch, CoverageMap, Origin, Seed};
use hfl::icfg::{build_inter_cfg, compute_reach};
use hfl::interp::{run_concrete, ExecConfig};
use hfl::ir::{parse_program, BlockRef};
use hfl::labels::{place_labels, LabelSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn oracle_sanity() {
    assert_eq!(common::oracle_weight(10, 0), 10.0);
    assert!((common::oracle_weight(10, 20) - 3.678_794_411_714_423_2).abs() < 1e-15);
}

#[test]
fn worked_example_two_branches() {
    // entry branches to an unexplored block reaching 1 label (b5 arm) and to
    // b2; b3 branches to b4 (taken) and an unexplored block reaching 2 labels
    let src = "inputlen 1
        func main(entry=b1) {
        b1: x = in.u8 0  c = cmp.ult x, 200  br c, b2, b5
        b2: jmp b3
        b3: d = cmp.ult x, 100  br d, b4, b7
        b4: ret
        b5: y = add.u8 x, 1  ret
        b7: z = mul.u8 x, 3  jmp b8
        b8: w = sub.u8 x, 5  ret
        }";
    let p = parse_program(src).unwrap();
    let labels = place_labels(&p);
    let reach = compute_reach(&build_inter_cfg(&p), &labels);
    let t = run_concrete(&p, &labels, &[1], &ExecConfig::default());
    let mut cov = CoverageMap::new();
    cov.merge_trace(&t);
    let seed = Seed::from_trace(0, vec![1], None, Origin::Initial, true, &t);
    let (s1, s2) = (3u32, 7u32);
    let mut ledger = AttemptLedger::default();
    let b = |blk| BlockRef::new(0, p.func(0).block_id(blk).unwrap());
    for _ in 0..s1 {
        ledger.bump(Branch { site: b("b1"), dir: false });
    }
    for _ in 0..s2 {
        ledger.bump(Branch { site: b("b3"), dir: false });
    }
    let sc = score_seed(&seed, &p, &reach, &ledger, &cov, DEFAULT_DECAY);
    assert_eq!(sc.n(), 2);
    let ls: Vec<usize> = sc.terms.iter().map(|t| t.labels).collect();
    assert_eq!(ls, vec![1, 2]);
    let expect = (common::oracle_weight(1, s1) + common::oracle_weight(2, s2)) / 2.0;
    assert!((sc.score - expect).abs() < 1e-9, "{} vs {expect}", sc.score);
}

#[test]
fn no_uncovered_branch_scores_zero() {
    let src = "inputlen 1 func main(entry=b0) { b0: x = in.u8 0  y = add.u8 x, 1  ret }";
    let p = parse_program(src).unwrap();
    let labels = place_labels(&p);
    let reach = compute_reach(&build_inter_cfg(&p), &labels);
    let t = run_concrete(&p, &labels, &[0], &ExecConfig::default());
    let seed = Seed::from_trace(0, vec![0], None, Origin::Initial, true, &t);
    let sc = score_seed(&seed, &p, &reach, &AttemptLedger::default(), &CoverageMap::new(), DEFAULT_DECAY);
    assert_eq!((sc.n(), sc.score), (0, 0.0));
}

#[test]
fn savior_orders_by_score_then_plus_cov() {
    let p = parse_program("func main(entry=b0) { b0: ret }").unwrap();
    let t = run_concrete(&p, &LabelSet::empty(&p), &[], &ExecConfig::default());
    let q: Vec<Seed> = (0..3).map(|i| Seed::from_trace(i, vec![0], None, Origin::Fuzzer, i == 1, &t)).collect();
    let scores = BTreeMap::from([(0, 5.0), (1, 5.0), (2, 1.0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(select_for_concolic(Policy::Savior, &q, &scores, 2, &mut rng), vec![1, 0]);
    assert!(select_for_concolic(Policy::Savior, &[], &scores, 2, &mut rng).is_empty());
    let random: BTreeSet<u32> = select_for_concolic(Policy::Random, &q, &scores, 3, &mut rng).into_iter().collect();
    assert_eq!(random, BTreeSet::from([0, 1, 2]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn formula_matches_oracle(terms in proptest::collection::vec((0u64..500, 0u32..120), 1..6)) {
        let got = score_formula(&terms.iter().map(|&(l, s)| (l as f64, s)).collect::<Vec<_>>(), DEFAULT_DECAY);
        let expect = terms.iter().map(|&(l, s)| common::oracle_weight(l, s)).sum::<f64>() / terms.len() as f64;
        prop_assert!((got - expect).abs() <= 1e-9 * expect.max(1.0));
    }
}
