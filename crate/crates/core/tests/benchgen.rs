//! Ground-truth manifests against replay of the generated programs.

use hfl::benchgen::{generate, hex, plant_infeasible, BenchSpec};
use hfl::interp::{run_concrete, ExecConfig};
use hfl::ir::parse_program;
use hfl::labels::place_labels;
use hfl::trim::trim_labels;

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

#[test]
fn manifest_rows_match_replay() {
    for seed in 0..40 {
        let b = generate(&BenchSpec { rng_seed: seed, ..Default::default() }).unwrap();
        let p = parse_program(&b.text).unwrap();
        let labels = place_labels(&p);
        let (trimmed, _) = trim_labels(&p, &labels);
        let csv = b.manifest_csv();
        let mut rows = csv.lines();
        assert_eq!(rows.next(), Some("bug_id,offset,magic_hex,input_hex"));
        let mut n = 0;
        for row in rows {
            let f: Vec<&str> = row.split(',').collect();
            let (id, off, magic, input) = (f[0].parse().unwrap(), f[1].parse::<usize>().unwrap(), unhex(f[2]), unhex(f[3]));
            assert_eq!(input.len(), p.input_len as usize);
            assert_eq!(&input[off..off + magic.len()], &magic[..]);
            assert_eq!(hex(&magic), f[2]);
            assert!(trimmed.get(id).unwrap().is_live(), "plant {id} trimmed");
            assert!(run_concrete(&p, &labels, &input, &ExecConfig::default()).violated(id));
            let mut miss = input.clone();
            miss[off..off + magic.len()].fill(0);
            assert!(!run_concrete(&p, &labels, &miss, &ExecConfig::default()).violated(id));
            n += 1;
        }
        assert_eq!(n, b.plants.len());
        b.certify().unwrap();
    }
}

#[test]
fn infeasible_labels_are_never_violated_by_fuzzing_inputs() {
    for seed in 0..10 {
        let b = plant_infeasible(&BenchSpec { rng_seed: seed, ..Default::default() }).unwrap();
        let id = b.infeasible[0];
        for r in std::iter::once(&b.dense).chain(&b.sparse) {
            let mut input = r.entry_input(b.program.input_len);
            for v in 0..=255u8 {
                input.iter_mut().skip(2).step_by(7).for_each(|x| *x = v);
                assert!(!run_concrete(&b.program, &b.labels, &input, &ExecConfig::default()).violated(id));
            }
        }
    }
}
