//! Mutation fuzzer: seed queue, AFL-style mutators and bucketed edge coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::interp::{run_concrete, ExecConfig, ExecTrace};
use crate::ir::{BlockRef, Edge, Program, Terminator};
use crate::labels::{LabelId, LabelSet};

#[derive(Debug, thiserror::Error)]
pub enum FuzzError {
    #[error("hit count 0 has no bucket: the edge was not executed")]
    ZeroHits,
    #[error("seed store: {0}")]
    Io(#[from] std::io::Error),
}

/// Index of the hit-count bucket: `[1] [2] [3] [4,7] [8,15] [16,31] [32,127] [128,inf)`.
pub fn bucket_of(hits: u64) -> Result<u8, FuzzError> {
    Ok(match hits {
        0 => return Err(FuzzError::ZeroHits),
        1 => 0,
        2 => 1,
        3 => 2,
        4..=7 => 3,
        8..=15 => 4,
        16..=31 => 5,
        32..=127 => 6,
        _ => 7,
    })
}

/// Edge to bitmask of buckets seen.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoverageMap {
    map: BTreeMap<Edge, u8>,
}

impl CoverageMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn edges(&self) -> usize {
        self.map.len()
    }

    pub fn pairs(&self) -> usize {
        self.map.values().map(|m| m.count_ones() as usize).sum()
    }

    pub fn covered(&self, e: &Edge) -> bool {
        self.map.contains_key(e)
    }

    pub fn buckets(&self, e: &Edge) -> u8 {
        self.map.get(e).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Edge, &u8)> {
        self.map.iter()
    }

    /// Number of (edge, bucket) pairs in `trace` that this map lacks.
    pub fn novelty(&self, trace: &ExecTrace) -> usize {
        trace
            .edge_hits
            .iter()
            .filter(|(e, &h)| self.buckets(e) & (1 << bucket_of(h as u64).unwrap()) == 0)
            .count()
    }

    /// Adds the trace's pairs, returning how many were new.
    pub fn merge_trace(&mut self, trace: &ExecTrace) -> usize {
        let mut fresh = 0;
        for (e, &h) in &trace.edge_hits {
            let bit = 1u8 << bucket_of(h as u64).unwrap();
            let slot = self.map.entry(*e).or_insert(0);
            if *slot & bit == 0 {
                *slot |= bit;
                fresh += 1;
            }
        }
        fresh
    }

    /// Monotone join (bitwise or per edge).
    pub fn join(&mut self, other: &CoverageMap) {
        for (e, m) in &other.map {
            *self.map.entry(*e).or_insert(0) |= m;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Initial,
    Fuzzer,
    Concolic,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Initial => "initial",
            Origin::Fuzzer => "fuzzer",
            Origin::Concolic => "concolic",
        })
    }
}

/// One arm of a conditional branch: `dir` is true for the then-arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Branch {
    pub site: BlockRef,
    pub dir: bool,
}

impl Branch {
    /// Target block of this arm, if `site` ends in a two-way branch.
    pub fn target(&self, program: &Program) -> Option<BlockRef> {
        match *program.terminator(self.site) {
            Terminator::Br { then_to, else_to, .. } if then_to != else_to => {
                Some(BlockRef::new(self.site.func, if self.dir { then_to } else { else_to }))
            }
            _ => None,
        }
    }

    pub fn edge(&self, program: &Program) -> Option<Edge> {
        self.target(program).map(|to| Edge { from: self.site, to })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seed {
    pub id: u32,
    pub bytes: Vec<u8>,
    pub parent: Option<u32>,
    pub origin: Origin,
    pub plus_cov: bool,
    pub concolic_tested: bool,
    pub path_digest: u64,
    /// Distinct branch arms taken on the seed's path.
    pub taken: BTreeSet<Branch>,
    pub labels_reached: BTreeSet<LabelId>,
    /// Free-form origin note, e.g. the flipped branch of a concolic output.
    pub provenance: String,
}

impl Seed {
    pub fn from_trace(id: u32, bytes: Vec<u8>, parent: Option<u32>, origin: Origin, plus_cov: bool, trace: &ExecTrace) -> Self {
        Seed {
            id,
            bytes,
            parent,
            origin,
            plus_cov,
            concolic_tested: false,
            path_digest: path_digest(trace),
            taken: trace.branches.iter().map(|&(site, dir)| Branch { site, dir }).collect(),
            labels_reached: trace.labels_reached.clone(),
            provenance: String::new(),
        }
    }

    /// Arms opposite to ones this seed takes, whose first edge is not covered.
    pub fn uncovered_branches(&self, program: &Program, cov: &CoverageMap) -> Vec<Branch> {
        let mut out: Vec<Branch> = self
            .taken
            .iter()
            .map(|b| Branch { site: b.site, dir: !b.dir })
            .filter(|b| b.edge(program).is_some_and(|e| !cov.covered(&e)))
            .collect();
        out.dedup();
        out
    }

    /// Length without trailing zero bytes.
    pub fn meaningful_len(&self) -> usize {
        self.bytes.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1)
    }

    pub fn file_name(&self) -> String {
        let src = self.parent.map_or_else(|| "none".to_string(), |p| format!("{p:06}"));
        let cov = if self.plus_cov { ",+cov" } else { "" };
        format!("id-{:06},src-{},{}{}", self.id, src, self.origin, cov)
    }
}

/// FNV-1a over the block sequence.
pub fn path_digest(trace: &ExecTrace) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in &trace.block_seq {
        for byte in b.func.to_le_bytes().into_iter().chain(b.block.to_le_bytes()) {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mutation {
    BitFlip,
    ByteFlip,
    Arith,
    Interesting,
    Splice,
}

impl Mutation {
    pub const ALL: [Mutation; 5] = [Mutation::BitFlip, Mutation::ByteFlip, Mutation::Arith, Mutation::Interesting, Mutation::Splice];
}

pub const INTERESTING: [u64; 7] = [0, 0xFF, 0x7F, 0x80, 0xFFFF, 0x7FFF_FFFF, 0x8000_0000];

/// Applies one mutation. The result is always `input_len` bytes long.
/// `donor` supplies bytes for splicing; without one, splicing is not chosen.
pub fn mutate(bytes: &[u8], input_len: usize, donor: Option<&[u8]>, rng: &mut ChaCha8Rng) -> (Vec<u8>, Mutation) {
    let mut out = bytes.to_vec();
    out.resize(input_len, 0);
    if input_len == 0 {
        return (out, Mutation::BitFlip);
    }
    let classes = if donor.is_some() { 5 } else { 4 };
    let m = Mutation::ALL[rng.gen_range(0..classes)];
    apply(&mut out, m, donor, rng);
    (out, m)
}

/// Applies a specific mutation class in place.
pub fn apply(out: &mut [u8], m: Mutation, donor: Option<&[u8]>, rng: &mut ChaCha8Rng) {
    let n = out.len();
    if n == 0 {
        return;
    }
    match m {
        Mutation::BitFlip => {
            let bit = rng.gen_range(0..n * 8);
            out[bit / 8] ^= 1 << (bit % 8);
        }
        Mutation::ByteFlip => {
            let i = rng.gen_range(0..n);
            out[i] ^= 0xFF;
        }
        Mutation::Arith => {
            let i = rng.gen_range(0..n);
            let d: u8 = rng.gen_range(1..=35);
            out[i] = if rng.gen() { out[i].wrapping_add(d) } else { out[i].wrapping_sub(d) };
        }
        Mutation::Interesting => {
            let v = INTERESTING[rng.gen_range(0..INTERESTING.len())];
            let need = if v <= 0xFF { 1 } else if v <= 0xFFFF { 2 } else { 4 };
            let widths: Vec<usize> = [1, 2, 4].into_iter().filter(|&w| w >= need && w <= n).collect();
            let Some(&w) = widths.get(rng.gen_range(0..widths.len().max(1))) else {
                return;
            };
            let off = rng.gen_range(0..n / w) * w;
            out[off..off + w].copy_from_slice(&v.to_le_bytes()[..w]);
        }
        Mutation::Splice => {
            let Some(d) = donor.filter(|d| !d.is_empty()) else {
                return;
            };
            let len = rng.gen_range(1..=16.min(n).min(d.len()));
            let src = rng.gen_range(0..=d.len() - len);
            let dst = rng.gen_range(0..=n - len);
            out[dst..dst + len].copy_from_slice(&d[src..src + len]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuzzConfig {
    pub exec: ExecConfig,
    /// Candidates per visit of an ordinary seed.
    pub energy: u32,
    /// Energy multiplier for +cov seeds.
    pub favored_factor: u32,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self { exec: ExecConfig::default(), energy: 16, favored_factor: 4 }
    }
}

/// Result of one fuzzing round.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundOutcome {
    pub execs: u64,
    pub new_seeds: Vec<u32>,
    /// Labels violated for the first time this round, with the input.
    pub new_violations: Vec<(LabelId, Vec<u8>)>,
}

/// Seed queue plus global coverage and violations.
#[derive(Clone, Debug)]
pub struct Fuzzer<'p> {
    pub program: &'p Program,
    pub labels: &'p LabelSet,
    pub config: FuzzConfig,
    pub queue: Vec<Seed>,
    pub coverage: CoverageMap,
    /// First witness input per violated label.
    pub violations: BTreeMap<LabelId, Vec<u8>>,
    pub total_execs: u64,
    cursor: usize,
}

impl<'p> Fuzzer<'p> {
    pub fn new(program: &'p Program, labels: &'p LabelSet, config: FuzzConfig) -> Self {
        Fuzzer {
            program,
            labels,
            config,
            queue: Vec::new(),
            coverage: CoverageMap::new(),
            violations: BTreeMap::new(),
            total_execs: 0,
            cursor: 0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.program.input_len as usize
    }

    pub fn run(&self, bytes: &[u8]) -> ExecTrace {
        run_concrete(self.program, self.labels, bytes, &self.config.exec)
    }

    pub fn seed(&self, id: u32) -> Option<&Seed> {
        self.queue.get(id as usize)
    }

    pub fn seed_mut(&mut self, id: u32) -> Option<&mut Seed> {
        self.queue.get_mut(id as usize)
    }

    /// Records a trace's violations; returns the labels seen for the first time.
    pub fn note_violations(&mut self, bytes: &[u8], trace: &ExecTrace) -> Vec<LabelId> {
        let mut fresh = Vec::new();
        for v in &trace.violations {
            if !self.violations.contains_key(&v.label) {
                let mut witness = bytes.to_vec();
                witness.resize(self.input_len(), 0);
                self.violations.insert(v.label, witness);
                fresh.push(v.label);
            }
        }
        fresh
    }

    /// Appends a seed unconditionally, merging its coverage. Seed ids equal
    /// queue positions.
    pub fn add_seed(&mut self, bytes: Vec<u8>, parent: Option<u32>, origin: Origin, trace: &ExecTrace) -> u32 {
        let mut bytes = bytes;
        bytes.resize(self.input_len(), 0);
        let fresh = self.coverage.merge_trace(trace);
        self.note_violations(&bytes, trace);
        let id = self.queue.len() as u32;
        self.queue.push(Seed::from_trace(id, bytes, parent, origin, fresh > 0, trace));
        id
    }

    /// Adds an initial seed (always retained).
    pub fn add_initial(&mut self, bytes: Vec<u8>) -> u32 {
        let trace = self.run(&bytes);
        self.add_seed(bytes, None, Origin::Initial, &trace)
    }

    fn donor<'a>(queue: &'a [Seed], rng: &mut ChaCha8Rng, not: usize) -> Option<&'a [u8]> {
        if queue.len() < 2 {
            return None;
        }
        let mut i = rng.gen_range(0..queue.len() - 1);
        if i >= not {
            i += 1;
        }
        Some(&queue[i].bytes)
    }

    /// Executes up to `budget` mutated candidates, retaining those that add
    /// an (edge, bucket) pair.
    pub fn fuzz_round(&mut self, budget: u64, rng: &mut ChaCha8Rng) -> RoundOutcome {
        let mut out = RoundOutcome::default();
        if self.queue.is_empty() {
            return out;
        }
        while out.execs < budget {
            let pick = self.cursor % self.queue.len();
            self.cursor = (pick + 1) % self.queue.len().max(1);
            let favored = self.queue[pick].plus_cov;
            let energy = self.config.energy * if favored { self.config.favored_factor } else { 1 };
            for _ in 0..energy {
                if out.execs >= budget {
                    break;
                }
                let donor = Self::donor(&self.queue, rng, pick);
                let (cand, _) = mutate(&self.queue[pick].bytes, self.input_len(), donor, rng);
                let trace = self.run(&cand);
                out.execs += 1;
                self.absorb(cand, pick as u32, trace, &mut out);
            }
        }
        self.total_execs += out.execs;
        out
    }

    fn absorb(&mut self, cand: Vec<u8>, parent: u32, trace: ExecTrace, out: &mut RoundOutcome) {
        for l in self.note_violations(&cand, &trace) {
            out.new_violations.push((l, self.violations[&l].clone()));
        }
        if self.coverage.novelty(&trace) > 0 {
            out.new_seeds.push(self.add_seed(cand, Some(parent), Origin::Fuzzer, &trace));
        }
    }

    /// Same contract as [`Fuzzer::fuzz_round`], with the budget split over
    /// one RNG stream per worker. Workers fuzz against a snapshot of the
    /// queue and their own coverage copy; their candidates are merged in
    /// worker order, re-checking novelty against the global map, so the
    /// outcome depends only on the RNG streams.
    pub fn fuzz_round_workers(&mut self, budget: u64, rngs: &mut [ChaCha8Rng]) -> RoundOutcome {
        if rngs.len() <= 1 {
            return match rngs.first_mut() {
                Some(r) => self.fuzz_round(budget, r),
                None => RoundOutcome::default(),
            };
        }
        let mut out = RoundOutcome::default();
        if self.queue.is_empty() {
            return out;
        }
        let n = rngs.len() as u64;
        let snapshot: &Fuzzer<'p> = self;
        let results: Vec<Vec<(Vec<u8>, u32, ExecTrace)>> = std::thread::scope(|s| {
            let handles: Vec<_> = rngs
                .iter_mut()
                .enumerate()
                .map(|(w, rng)| {
                    let share = budget / n + u64::from((w as u64) < budget % n);
                    s.spawn(move || snapshot.worker(w, share, rng))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fuzz worker panicked")).collect()
        });
        for batch in results {
            for (cand, parent, trace) in batch {
                self.absorb(cand, parent, trace, &mut out);
            }
        }
        out.execs = budget;
        self.total_execs += budget;
        self.cursor = (self.cursor + 1) % self.queue.len();
        out
    }

    fn worker(&self, w: usize, budget: u64, rng: &mut ChaCha8Rng) -> Vec<(Vec<u8>, u32, ExecTrace)> {
        let mut local = self.coverage.clone();
        let mut found = Vec::new();
        let mut violated: BTreeSet<LabelId> = self.violations.keys().copied().collect();
        let mut cursor = self.cursor + w;
        let mut execs = 0;
        while execs < budget {
            let pick = cursor % self.queue.len();
            cursor += 1;
            let energy = self.config.energy * if self.queue[pick].plus_cov { self.config.favored_factor } else { 1 };
            for _ in 0..energy {
                if execs >= budget {
                    break;
                }
                let donor = Self::donor(&self.queue, rng, pick);
                let (cand, _) = mutate(&self.queue[pick].bytes, self.input_len(), donor, rng);
                let trace = self.run(&cand);
                execs += 1;
                let new_violation = trace.violations.iter().any(|v| violated.insert(v.label));
                if local.merge_trace(&trace) > 0 || new_violation {
                    found.push((cand, pick as u32, trace));
                }
            }
        }
        found
    }
}

/// Writes every seed as a raw file named by [`Seed::file_name`] and a
/// `provenance.csv` index.
pub fn write_seed_store(dir: &Path, seeds: &[Seed]) -> Result<(), FuzzError> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("id,parent,origin,plus_cov,provenance,file\n");
    for s in seeds {
        let name = s.file_name();
        std::fs::write(dir.join(&name), &s.bytes)?;
        let parent = s.parent.map(|p| p.to_string()).unwrap_or_default();
        index.push_str(&format!("{},{},{},{},{},{}\n", s.id, parent, s.origin, s.plus_cov, s.provenance, name));
    }
    std::fs::write(dir.join("provenance.csv"), index)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::labels::place_labels;
    use rand::SeedableRng;

    #[test]
    fn bucket_boundaries() {
        let b = |h| bucket_of(h).unwrap();
        assert_eq!((b(1), b(3), b(5)), (0, 2, 3));
        assert_eq!((b(7), b(8)), (3, 4));
        assert_eq!((b(128), b(1_000_000_000)), (7, 7));
        assert!(bucket_of(0).is_err());
    }

    #[test]
    fn bit_flip_and_interesting_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = vec![0u8; 4];
        // find a draw that flips bit 0
        loop {
            let mut w = v.clone();
            apply(&mut w, Mutation::BitFlip, None, &mut rng);
            if w[0] == 1 {
                v = w;
                break;
            }
        }
        assert_eq!(v, [1, 0, 0, 0]);
        let mut seen = false;
        for _ in 0..2000 {
            let mut w = vec![0u8; 4];
            apply(&mut w, Mutation::Interesting, None, &mut rng);
            if w == [0xFF, 0xFF, 0xFF, 0x7F] {
                seen = true;
            }
            assert_eq!(w.len(), 4);
        }
        assert!(seen);
    }

    #[test]
    fn plus_one_arithmetic_finds_the_branch() {
        let src = "inputlen 4 func main(entry=b0) { b0: x = in.u8 0 c = cmp.eq x, 0x41 br c, b1, b2 b1: ret b2: ret }";
        let p = parse_program(src).unwrap();
        let l = place_labels(&p);
        let mut f = Fuzzer::new(&p, &l, FuzzConfig::default());
        f.add_initial(vec![0x40, 0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = f.fuzz_round(2000, &mut rng);
        assert_eq!(out.new_seeds.len(), 1);
        assert_eq!(f.queue[1].bytes[0], 0x41);
        assert!(f.queue[1].plus_cov);
    }

    #[test]
    fn zero_budget_is_a_no_op() {
        let p = parse_program("inputlen 1 func main(entry=b0) { b0: ret }").unwrap();
        let l = place_labels(&p);
        let mut f = Fuzzer::new(&p, &l, FuzzConfig::default());
        f.add_initial(vec![0]);
        let before = f.coverage.clone();
        let out = f.fuzz_round(0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, RoundOutcome::default());
        assert_eq!(f.coverage, before);
    }

    #[test]
    fn seed_file_names() {
        let p = parse_program("inputlen 1 func main(entry=b0) { b0: ret }").unwrap();
        let l = place_labels(&p);
        let mut f = Fuzzer::new(&p, &l, FuzzConfig::default());
        f.add_initial(vec![0]);
        let t = f.run(&[1]);
        f.add_seed(vec![1], Some(0), Origin::Fuzzer, &t);
        assert_eq!(f.queue[0].file_name(), "id-000000,src-none,initial");
        assert_eq!(f.queue[1].file_name(), "id-000001,src-000000,fuzzer");
    }
}
