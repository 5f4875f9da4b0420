//! Trimming soundness: no trimmed label is violated by any input.

mod common;

use hfl::ir::parse_program;
use hfl::labels::{place_labels, LabelId};
use hfl::trim::trim_labels;
use proptest::prelude::*;
use std::collections::BTreeSet;

const LOOP: &str = "
    func main(entry=b0) {
    b0: i = const.u32 0
        a = arr.alloc.u32 16
        jmp b1
    b1: c = cmp.ult i, 16
        br c, b2, b3
    b2: v = arr.load a, i
        i = add.u32 i, 1
        jmp b1
    b3: ret
    }";

#[test]
fn bounded_loop_labels_are_both_trimmed() {
    let p = parse_program(LOOP).unwrap();
    let (live, report) = trim_labels(&p, &place_labels(&p));
    assert_eq!(report.trimmed.len(), 2);
    assert_eq!(live.live_count(), 0);
}

#[test]
fn generated_programs_parse() {
    for s in 0..300 {
        let text = common::trim_program(s, 1 + (s % 3) as u32);
        parse_program(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
    }
}

#[test]
fn generator_exercises_trimming() {
    let trimmed: usize = (0..200)
        .map(|s| {
            let p = parse_program(&common::trim_program(s, 2)).unwrap();
            trim_labels(&p, &place_labels(&p)).1.trimmed.len()
        })
        .sum();
    assert!(trimmed >= 20, "only {trimmed} labels trimmed");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trimmed_labels_are_untriggerable(seed: u64, len in 1u32..=2) {
        let p = parse_program(&common::trim_program(seed, len)).unwrap();
        let all = place_labels(&p);
        let (_, report) = trim_labels(&p, &all);
        let trimmed: BTreeSet<LabelId> = report.trimmed.iter().map(|e| e.label).collect();
        let hit = common::triggerable(&p, &all, &trimmed);
        prop_assert!(hit.is_empty(), "trimmed but triggerable: {:?}", hit);
    }
}
