//! Campaign driver: fuzzing rounds, seed scoring and scheduling for concolic
//! execution, triage of concolic outputs and the per-branch attempt ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::concolic::{ConcolicConfig, ConcolicEngine, ConcolicOutcome, TestKind};
use crate::fuzz::{Branch, CoverageMap, FuzzConfig, Fuzzer, Origin, Seed};
use crate::icfg::ReachTable;
use crate::interp::ExecConfig;
use crate::ir::Program;
use crate::labels::{Family, LabelId, LabelSet};

pub const DEFAULT_DECAY: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Bug-driven score.
    Savior,
    /// Uniform draw.
    Random,
    /// Fewest meaningful input bytes first.
    Smallest,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Savior => "savior",
            Policy::Random => "random",
            Policy::Smallest => "smallest",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown policy `{0}` (expected savior, random or smallest)")]
pub struct UnknownPolicy(String);

impl FromStr for Policy {
    type Err = UnknownPolicy;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "savior" => Ok(Policy::Savior),
            "random" => Ok(Policy::Random),
            "smallest" | "smallestFirst" | "smallest-first" => Ok(Policy::Smallest),
            other => Err(UnknownPolicy(other.to_string())),
        }
    }
}

/// Global count of concolic runs that attempted each branch arm while it
/// was uncovered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttemptLedger {
    counts: BTreeMap<Branch, u32>,
}

impl AttemptLedger {
    pub fn get(&self, b: &Branch) -> u32 {
        self.counts.get(b).copied().unwrap_or(0)
    }

    pub fn bump(&mut self, b: Branch) {
        *self.counts.entry(b).or_insert(0) += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Branch, &u32)> {
        self.counts.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTerm {
    pub branch: Branch,
    /// Labels reachable from the arm's target block, plus its own.
    pub labels: usize,
    pub attempts: u32,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedScore {
    pub seed: u32,
    pub terms: Vec<ScoreTerm>,
    pub score: f64,
}

impl SeedScore {
    pub fn n(&self) -> usize {
        self.terms.len()
    }
}

/// Weighted average of `e^(-decay * S) * L` over `(L, S)` pairs; 0 when empty.
pub fn score_formula(terms: &[(f64, u32)], decay: f64) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let sum: f64 = terms.iter().map(|&(l, s)| (-decay * s as f64).exp() * l).sum();
    sum / terms.len() as f64
}

pub fn score_seed(seed: &Seed, program: &Program, reach: &ReachTable, ledger: &AttemptLedger, cov: &CoverageMap, decay: f64) -> SeedScore {
    let terms: Vec<ScoreTerm> = seed
        .uncovered_branches(program, cov)
        .into_iter()
        .map(|branch| {
            let target = branch.target(program).expect("uncovered branches have targets");
            let labels = reach.count_from(target);
            let attempts = ledger.get(&branch);
            ScoreTerm { branch, labels, attempts, weight: (-decay * attempts as f64).exp() * labels as f64 }
        })
        .collect();
    let score = score_formula(&terms.iter().map(|t| (t.labels as f64, t.attempts)).collect::<Vec<_>>(), decay);
    SeedScore { seed: seed.id, terms, score }
}

/// Picks up to `k` seeds not yet run concolically.
pub fn select_for_concolic(policy: Policy, queue: &[Seed], scores: &BTreeMap<u32, f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut eligible: Vec<&Seed> = queue.iter().filter(|s| !s.concolic_tested).collect();
    match policy {
        Policy::Savior => {
            let score = |s: &Seed| scores.get(&s.id).copied().unwrap_or(0.0);
            eligible.sort_by(|a, b| {
                score(b).total_cmp(&score(a)).then(b.plus_cov.cmp(&a.plus_cov)).then(a.id.cmp(&b.id))
            });
        }
        Policy::Random => {
            eligible.shuffle(rng);
        }
        Policy::Smallest => eligible.sort_by_key(|s| (s.meaningful_len(), s.id)),
    }
    eligible.into_iter().take(k).map(|s| s.id).collect()
}

/// Symbolic-instruction budget: `tau * max(1, uncovered branches)`.
pub fn concolic_timeout(tau: u64, uncovered: usize) -> u64 {
    tau.saturating_mul(uncovered.max(1) as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stop {
    Rounds,
    /// All planted labels triggered, or the round limit, whichever is first.
    AllPlanted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignConfig {
    pub policy: Policy,
    pub rounds: u32,
    pub fuzz_execs: u64,
    /// Seeds scheduled for concolic execution per round.
    pub concolic_per_round: usize,
    /// Run the concolic side at all.
    pub concolic: bool,
    pub tau: u64,
    pub decay: f64,
    pub rng_seed: u64,
    pub stop: Stop,
    pub workers: usize,
    pub fuzz: FuzzConfig,
    pub engine: ConcolicConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Savior,
            rounds: 20,
            fuzz_execs: 1000,
            concolic_per_round: 1,
            concolic: true,
            tau: 10_000,
            decay: DEFAULT_DECAY,
            rng_seed: 0,
            stop: Stop::Rounds,
            workers: 1,
            fuzz: FuzzConfig::default(),
            engine: ConcolicConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RoundStats {
    pub round: u32,
    pub edges: usize,
    pub pairs: usize,
    pub labels_reached: usize,
    pub labels_triggered: usize,
    pub planted_triggered: usize,
    pub policy: Policy,
    /// Seeds run concolically this round, in schedule order.
    pub scheduled: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BugRecord {
    pub label: LabelId,
    pub family: Family,
    pub first_round: u32,
    pub witness: Vec<u8>,
}

impl BugRecord {
    pub fn witness_file(&self) -> String {
        format!("witness-{:06}.bin", self.label)
    }
}

/// `label_id,family,first_round,witness_file` rows, by label id.
pub fn bug_report_csv(bugs: &BTreeMap<LabelId, BugRecord>) -> String {
    let mut out = String::from("label_id,family,first_round,witness_file\n");
    for b in bugs.values() {
        out.push_str(&format!("{},{},{},{}\n", b.label, b.family, b.first_round, b.witness_file()));
    }
    out
}

pub struct Campaign<'p> {
    pub program: &'p Program,
    pub labels: &'p LabelSet,
    pub reach: &'p ReachTable,
    pub config: CampaignConfig,
    pub fuzzer: Fuzzer<'p>,
    pub ledger: AttemptLedger,
    pub bugs: BTreeMap<LabelId, BugRecord>,
    pub planted: BTreeSet<LabelId>,
    /// Scores as of the last round boundary.
    pub scores: BTreeMap<u32, SeedScore>,
    pub stats: Vec<RoundStats>,
    round: u32,
    fuzz_rngs: Vec<ChaCha8Rng>,
    sched_rng: ChaCha8Rng,
}

/// Independent stream `k` derived from the campaign seed.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

impl<'p> Campaign<'p> {
    /// Starts a campaign from one all-zero seed.
    pub fn new(program: &'p Program, labels: &'p LabelSet, reach: &'p ReachTable, config: CampaignConfig) -> Self {
        let mut fuzzer = Fuzzer::new(program, labels, config.fuzz);
        fuzzer.add_initial(vec![0; program.input_len as usize]);
        let workers = config.workers.max(1) as u64;
        let mut c = Campaign {
            program,
            labels,
            reach,
            fuzz_rngs: (0..workers).map(|w| stream(config.rng_seed, 1 + w)).collect(),
            sched_rng: stream(config.rng_seed, 0),
            config,
            fuzzer,
            ledger: AttemptLedger::default(),
            bugs: BTreeMap::new(),
            planted: BTreeSet::new(),
            scores: BTreeMap::new(),
            stats: Vec::new(),
            round: 0,
        };
        c.record_fuzz_violations();
        c
    }

    pub fn with_planted(mut self, planted: impl IntoIterator<Item = LabelId>) -> Self {
        self.planted = planted.into_iter().collect();
        self
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn exec_config(&self) -> ExecConfig {
        self.config.fuzz.exec
    }

    fn record(&mut self, label: LabelId, witness: &[u8]) {
        if self.bugs.contains_key(&label) {
            return;
        }
        let Some(l) = self.labels.get(label) else { return };
        let mut witness = witness.to_vec();
        witness.resize(self.program.input_len as usize, 0);
        self.bugs.insert(label, BugRecord { label, family: l.family(), first_round: self.round, witness });
    }

    fn record_fuzz_violations(&mut self) {
        let found: Vec<(LabelId, Vec<u8>)> = self.fuzzer.violations.iter().map(|(l, w)| (*l, w.clone())).collect();
        for (l, w) in found {
            self.record(l, &w);
        }
    }

    pub fn triggered(&self) -> BTreeSet<LabelId> {
        self.bugs.keys().copied().collect()
    }

    pub fn labels_reached(&self) -> BTreeSet<LabelId> {
        self.fuzzer.queue.iter().flat_map(|s| s.labels_reached.iter().copied()).collect()
    }

    pub fn all_planted_triggered(&self) -> bool {
        !self.planted.is_empty() && self.planted.iter().all(|l| self.bugs.contains_key(l))
    }

    pub fn finished(&self) -> bool {
        self.round >= self.config.rounds || (self.config.stop == Stop::AllPlanted && self.all_planted_triggered())
    }

    /// Recomputes scores of seeds not yet run concolically.
    pub fn rescore(&mut self) {
        for s in &self.fuzzer.queue {
            if s.concolic_tested {
                continue;
            }
            let sc = score_seed(s, self.program, self.reach, &self.ledger, &self.fuzzer.coverage, self.config.decay);
            self.scores.insert(s.id, sc);
        }
    }

    /// Plays one round and returns its stats.
    pub fn step(&mut self) -> RoundStats {
        self.round += 1;
        let budget = self.config.fuzz_execs;
        self.fuzzer.fuzz_round_workers(budget, &mut self.fuzz_rngs);
        self.record_fuzz_violations();

        let mut scheduled = Vec::new();
        if self.config.concolic && self.config.concolic_per_round > 0 {
            self.rescore();
            let flat: BTreeMap<u32, f64> = self.scores.iter().map(|(id, s)| (*id, s.score)).collect();
            scheduled = select_for_concolic(self.config.policy, &self.fuzzer.queue, &flat, self.config.concolic_per_round, &mut self.sched_rng);
            self.run_concolic(&scheduled);
        }

        let planted_triggered = self.planted.iter().filter(|l| self.bugs.contains_key(l)).count();
        let stats = RoundStats {
            round: self.round,
            edges: self.fuzzer.coverage.edges(),
            pairs: self.fuzzer.coverage.pairs(),
            labels_reached: self.labels_reached().len(),
            labels_triggered: self.bugs.len(),
            planted_triggered,
            policy: self.config.policy,
            scheduled,
        };
        self.stats.push(stats.clone());
        stats
    }

    fn run_concolic(&mut self, scheduled: &[u32]) {
        let jobs: Vec<(u32, Vec<u8>, u64)> = scheduled
            .iter()
            .map(|&id| {
                let s = &self.fuzzer.queue[id as usize];
                let n = s.uncovered_branches(self.program, &self.fuzzer.coverage).len();
                (id, s.bytes.clone(), concolic_timeout(self.config.tau, n))
            })
            .collect();
        for &id in scheduled {
            self.fuzzer.queue[id as usize].concolic_tested = true;
        }
        if self.config.workers > 1 && jobs.len() > 1 {
            // concurrent engines against one coverage snapshot, merged in schedule order
            let (program, labels, cfg) = (self.program, self.labels, self.config.engine);
            let cov = self.fuzzer.coverage.clone();
            let skip = self.triggered();
            let outcomes: Vec<ConcolicOutcome> = std::thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .iter()
                    .map(|(_, bytes, t)| {
                        let (cov, skip) = (&cov, &skip);
                        s.spawn(move || ConcolicEngine::new(program, labels, cfg).run(bytes, cov, skip, *t))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("concolic worker panicked")).collect()
            });
            for ((id, _, _), out) in jobs.iter().zip(outcomes) {
                self.triage(*id, out);
            }
        } else {
            let mut engine = ConcolicEngine::new(self.program, self.labels, self.config.engine);
            for (id, bytes, t) in jobs {
                let skip = self.triggered();
                let out = engine.run(&bytes, &self.fuzzer.coverage, &skip, t);
                engine.reset();
                self.triage(id, out);
            }
        }
    }

    /// Retains outputs that add coverage or reach a live label not yet
    /// triggered, records confirmed bugs, and charges the ledger for every
    /// attempted arm that is still uncovered.
    pub fn triage(&mut self, source: u32, out: ConcolicOutcome) {
        for (label, witness) in &out.triggered {
            self.record(*label, witness);
        }
        for t in &out.tests {
            let trace = self.fuzzer.run(&t.bytes);
            for v in &trace.violations {
                self.record(v.label, &t.bytes);
            }
            self.fuzzer.note_violations(&t.bytes, &trace);
            let fresh = self.fuzzer.coverage.novelty(&trace) > 0;
            let untriggered = trace.labels_reached.iter().any(|l| !self.bugs.contains_key(l));
            let duplicate = self.fuzzer.queue.iter().any(|s| s.bytes == t.bytes);
            if (fresh || untriggered) && !duplicate {
                let id = self.fuzzer.add_seed(t.bytes.clone(), Some(source), Origin::Concolic, &trace);
                self.fuzzer.queue[id as usize].provenance = match t.kind {
                    TestKind::Flip(b) => format!("flip:{}:{}:{}", b.site.func, b.site.block, if b.dir { "then" } else { "else" }),
                    TestKind::Verify { label, mode } => format!("verify:{label}:{mode:?}").to_lowercase(),
                };
            }
        }
        for b in &out.attempted {
            let still = b.edge(self.program).is_some_and(|e| !self.fuzzer.coverage.covered(&e));
            if still {
                self.ledger.bump(*b);
            }
        }
    }

    /// Runs rounds until the stop condition holds.
    pub fn run(&mut self) -> &[RoundStats] {
        while !self.finished() {
            self.step();
        }
        &self.stats
    }

    pub fn stats_jsonl(&self) -> String {
        self.stats.iter().map(|s| serde_json::to_string(s).expect("stats serialize") + "\n").collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(id: u32, plus_cov: bool) -> Seed {
        Seed {
            id,
            bytes: vec![0; 4],
            parent: None,
            origin: Origin::Fuzzer,
            plus_cov,
            concolic_tested: false,
            path_digest: 0,
            taken: BTreeSet::new(),
            labels_reached: BTreeSet::new(),
            provenance: String::new(),
        }
    }

    #[test]
    fn formula_basics() {
        assert_eq!(score_formula(&[(10.0, 0)], DEFAULT_DECAY), 10.0);
        assert!((score_formula(&[(10.0, 20)], DEFAULT_DECAY) - 3.678_794_411_714_423).abs() < 1e-9);
        assert_eq!(score_formula(&[], DEFAULT_DECAY), 0.0);
    }

    #[test]
    fn ties_prefer_plus_cov_then_lower_id() {
        let q = vec![seed(0, false), seed(1, true), seed(2, false)];
        let scores = BTreeMap::from([(0, 5.0), (1, 5.0), (2, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_for_concolic(Policy::Savior, &q, &scores, 2, &mut rng), vec![1, 0]);
    }

    #[test]
    fn tested_seeds_are_not_scheduled() {
        let mut q = vec![seed(0, false), seed(1, false)];
        q[0].concolic_tested = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_for_concolic(Policy::Savior, &q, &BTreeMap::new(), 5, &mut rng), vec![1]);
        q[1].concolic_tested = true;
        assert!(select_for_concolic(Policy::Random, &q, &BTreeMap::new(), 5, &mut rng).is_empty());
    }

    #[test]
    fn smallest_first_uses_meaningful_length() {
        let mut q = vec![seed(0, false), seed(1, false)];
        q[0].bytes = vec![1, 1, 0, 0];
        q[1].bytes = vec![1, 0, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_for_concolic(Policy::Smallest, &q, &BTreeMap::new(), 2, &mut rng), vec![1, 0]);
    }

    #[test]
    fn timeout_is_proportional() {
        assert_eq!(concolic_timeout(10_000, 0), 10_000);
        assert_eq!(concolic_timeout(10_000, 7), 70_000);
        assert_eq!(concolic_timeout(10, 8), 2 * concolic_timeout(10, 4));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [Policy::Savior, Policy::Random, Policy::Smallest] {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("afl".parse::<Policy>().is_err());
    }
}
