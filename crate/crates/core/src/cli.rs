//! Command-line front end: `analyze`, `gen`, `replay`, `score`, `run` and
//! `plotdata`. Exit codes: 0 on success, 1 on usage error, 2 when a
//! component fails.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::benchgen::{self, BenchError, BenchSpec, PlantKind, PlantSpec, Region};
use crate::coordinator::{bug_report_csv, score_seed, AttemptLedger, Campaign, CampaignConfig, Policy, Stop};
use crate::fuzz::{write_seed_store, CoverageMap, FuzzError, Origin, Seed};
use crate::icfg::{build_inter_cfg, compute_reach, ReachTable};
use crate::interp::{run_concrete, ExecConfig};
use crate::ir::{parse_program, IrError, Program};
use crate::labels::{place_labels, LabelId, LabelSet};
use crate::trim::trim_labels;

pub const SEED_DIR_ENV: &str = "HFL_SEED_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Ir { path: PathBuf, source: IrError },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Parser, Debug)]
#[command(name = "hfl", version, about = "Hybrid fuzzing with bug-driven seed scheduling")]
struct Cli {
    /// More output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Dump labels, the trim report and per-block reach counts.
    Analyze {
        program: PathBuf,
        #[arg(long)]
        labels: bool,
        #[arg(long)]
        trim: bool,
        #[arg(long)]
        reach: bool,
    },
    /// Generate a benchmark program and its ground-truth manifest.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        sparse: usize,
        #[arg(long, default_value_t = 10)]
        skew: u32,
        #[arg(long, default_value_t = 2)]
        sparse_labels: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 0.25)]
        icall_fraction: f64,
        /// `KIND@REGION`, e.g. `magic32@entry`, `chain4@dense`, `magic32@sparse0`
        /// (repeatable; defaults to a built-in set).
        #[arg(long = "plant")]
        plants: Vec<String>,
        /// Also plant one provably untriggerable label.
        #[arg(long)]
        infeasible: bool,
        /// Directory receiving `program.ir` and `manifest.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute one input and print its trace and violations.
    Replay { program: PathBuf, seed: PathBuf },
    /// Score every seed of a seed store.
    Score {
        program: PathBuf,
        /// Seed directory (default: $HFL_SEED_DIR).
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, default_value_t = crate::coordinator::DEFAULT_DECAY)]
        decay: f64,
    },
    /// Run a hybrid campaign.
    Run {
        program: PathBuf,
        #[command(flatten)]
        campaign: CampaignArgs,
        /// Directory for stats, bug report, witnesses and the seed store.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rounds-to-bug curves per policy, as CSV.
    Plotdata {
        program: PathBuf,
        #[command(flatten)]
        campaign: CampaignArgs,
        /// Comma-separated policies.
        #[arg(long, default_value = "savior,random")]
        policies: String,
        /// Repetitions per policy, with rng seeds `rng, rng+1, ...`.
        #[arg(long, default_value_t = 5)]
        reps: u64,
    },
}

#[derive(clap::Args, Debug, Default)]
struct CampaignArgs {
    /// Flat `key = value` config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    rng: Option<u64>,
    /// Single worker; output depends only on the config.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    fuzz_execs: Option<u64>,
    /// Seeds given to concolic execution per round.
    #[arg(long)]
    per_round: Option<usize>,
    /// Pure fuzzing.
    #[arg(long)]
    no_concolic: bool,
    /// Ground-truth manifest (`bug_id,...` CSV) naming the planted bugs.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `rounds` or `all-planted`.
    #[arg(long)]
    stop: Option<String>,
}

/// Applies one `key = value` setting.
fn apply_setting(cfg: &mut CampaignConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
        v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
    }
    match key {
        "policy" => cfg.policy = value.parse().map_err(|e: crate::coordinator::UnknownPolicy| e.to_string())?,
        "rounds" => cfg.rounds = num(key, value)?,
        "fuzz_execs" => cfg.fuzz_execs = num(key, value)?,
        "per_round" => cfg.concolic_per_round = num(key, value)?,
        "concolic" => cfg.concolic = num(key, value)?,
        "tau" => cfg.tau = num(key, value)?,
        "decay" => cfg.decay = num(key, value)?,
        "rng" => cfg.rng_seed = num(key, value)?,
        "workers" => cfg.workers = num(key, value)?,
        "energy" => cfg.fuzz.energy = num(key, value)?,
        "favored_factor" => cfg.fuzz.favored_factor = num(key, value)?,
        "query_cost" => cfg.engine.query_cost = num(key, value)?,
        "search_budget" => cfg.engine.solver.search_budget = num(key, value)?,
        "exec_budget" => {
            cfg.fuzz.exec.budget = num(key, value)?;
            cfg.engine.exec.budget = cfg.fuzz.exec.budget;
        }
        "stop" => {
            cfg.stop = match value {
                "rounds" => Stop::Rounds,
                "all-planted" | "all_planted" => Stop::AllPlanted,
                _ => return Err(format!("bad value `{value}` for `stop`")),
            }
        }
        _ => return Err(format!("unknown config key `{key}`")),
    }
    Ok(())
}

pub fn parse_config_text(text: &str, cfg: &mut CampaignConfig) -> Result<(), String> {
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        apply_setting(cfg, k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
    }
    Ok(())
}

impl CampaignArgs {
    fn config(&self) -> Result<CampaignConfig, CliError> {
        let mut cfg = CampaignConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            parse_config_text(&text, &mut cfg).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        let mut set = |k: &str, v: String| apply_setting(&mut cfg, k, &v).map_err(CliError::Usage);
        if let Some(p) = &self.policy {
            set("policy", p.clone())?;
        }
        if let Some(v) = self.rounds {
            set("rounds", v.to_string())?;
        }
        if let Some(v) = self.rng {
            set("rng", v.to_string())?;
        }
        if let Some(v) = self.workers {
            set("workers", v.to_string())?;
        }
        if let Some(v) = self.fuzz_execs {
            set("fuzz_execs", v.to_string())?;
        }
        if let Some(v) = self.per_round {
            set("per_round", v.to_string())?;
        }
        if let Some(v) = &self.stop {
            set("stop", v.clone())?;
        }
        if self.no_concolic {
            cfg.concolic = false;
        }
        if self.deterministic {
            cfg.workers = 1;
        }
        if cfg.workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        Ok(cfg)
    }

    fn planted(&self) -> Result<BTreeSet<LabelId>, CliError> {
        match &self.manifest {
            Some(p) => read_manifest(p),
            None => Ok(BTreeSet::new()),
        }
    }
}

/// Bug ids listed in a manifest.
pub fn read_manifest(path: &Path) -> Result<BTreeSet<LabelId>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let id = line.split(',').next().unwrap_or("").trim();
        let id = id.parse().map_err(|_| CliError::Manifest { path: path.into(), line: i + 1, msg: format!("bad bug id `{id}`") })?;
        ids.insert(id);
    }
    Ok(ids)
}

fn load_program(path: &Path) -> Result<Program, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_program(&text).map_err(|source| CliError::Ir { path: path.into(), source })
}

/// Trimmed labels and their reach table, as the campaign uses them.
fn analysis(p: &Program) -> (LabelSet, ReachTable) {
    let (labels, _) = trim_labels(p, &place_labels(p));
    let reach = compute_reach(&build_inter_cfg(p), &labels);
    (labels, reach)
}

fn site_name(p: &Program, labels: &LabelSet, id: LabelId) -> String {
    let l = labels.get(id).expect("label exists");
    format!("{}#{}", p.block_name(l.site.block_ref()), l.site.index)
}

fn parse_plant(s: &str) -> Result<PlantSpec, CliError> {
    let bad = || CliError::Usage(format!("bad plant `{s}` (expected KIND@REGION, e.g. magic32@dense)"));
    let (kind, region) = s.split_once('@').ok_or_else(bad)?;
    let kind = match kind {
        "magic32" => PlantKind::Magic32,
        k => match k.strip_prefix("chain").and_then(|n| n.parse().ok()) {
            Some(n) => PlantKind::ByteChain(n),
            None => return Err(bad()),
        },
    };
    let region = match region {
        "entry" => Region::Entry,
        "dense" => Region::Dense,
        r => Region::Sparse(r.strip_prefix("sparse").and_then(|n| n.parse().ok()).ok_or_else(bad)?),
    };
    Ok(PlantSpec { kind, region })
}

/// Seed files of a store, sorted by name.
fn read_seed_dir(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, CliError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !entry.path().is_file() || name.ends_with(".csv") {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(io_err(&entry.path()))?;
        out.push((name, bytes));
    }
    out.sort();
    Ok(out)
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, data).map_err(io_err(path))
}

fn analyze(out: &mut dyn Write, program: &Path, labels: bool, trim: bool, reach: bool) -> Result<(), CliError> {
    let p = load_program(program)?;
    let (all, sel) = if labels || trim || reach { (labels, (trim, reach)) } else { (true, (true, true)) };
    let (trim, reach) = sel;
    let placed = place_labels(&p);
    let (trimmed, report) = trim_labels(&p, &placed);
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err(Path::new("<stdout>")));
    if all {
        w(out, format!("labels {}", placed.len()))?;
        for l in placed.iter() {
            let status = if trim && !trimmed.get(l.id).is_some_and(|t| t.is_live()) { " trimmed" } else { "" };
            w(out, format!("{} {} {}{status}", l.id, l.family(), site_name(&p, &placed, l.id)))?;
        }
    }
    if trim {
        w(out, format!("trimmed {}/{}", report.trimmed.len(), report.total))?;
        for e in &report.trimmed {
            w(out, format!("{} idom={} guard=[{}]", e.label, p.block_name(e.parent), e.guard))?;
        }
    }
    if reach {
        let used = if trim { &trimmed } else { &placed };
        let table = compute_reach(&build_inter_cfg(&p), used);
        w(out, "reach".into())?;
        for b in p.blocks() {
            w(out, format!("{} {}", p.block_name(b), table.count(b)))?;
        }
    }
    Ok(())
}

fn replay(out: &mut dyn Write, program: &Path, seed: &Path) -> Result<(), CliError> {
    let p = load_program(program)?;
    let bytes = std::fs::read(seed).map_err(io_err(seed))?;
    let labels = place_labels(&p);
    let t = run_concrete(&p, &labels, &bytes, &ExecConfig::default());
    let io = io_err(Path::new("<stdout>"));
    let path: Vec<String> = t.block_seq.iter().map(|b| p.block_name(*b)).collect();
    let mut text = format!("status {:?}\ninstructions {}\nret {}\npath {}\n", t.status, t.instr_count, t.ret_code, path.join(" "));
    for v in &t.violations {
        let l = labels.get(v.label).expect("violated label exists");
        let ops: Vec<String> = v.operands.iter().map(|o| format!("{o:#x}")).collect();
        text.push_str(&format!("violation {} {} {} [{}]\n", v.label, l.family(), site_name(&p, &labels, v.label), ops.join(", ")));
    }
    out.write_all(text.as_bytes()).map_err(io)
}

fn score(out: &mut dyn Write, program: &Path, seeds: Option<PathBuf>, decay: f64) -> Result<(), CliError> {
    let dir = seeds
        .or_else(|| std::env::var_os(SEED_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("no seed directory: pass --seeds or set {SEED_DIR_ENV}")))?;
    let p = load_program(program)?;
    let (labels, reach) = analysis(&p);
    let files = read_seed_dir(&dir)?;
    let mut cov = CoverageMap::new();
    let mut seeds = Vec::new();
    for (i, (_, bytes)) in files.iter().enumerate() {
        let t = run_concrete(&p, &labels, bytes, &ExecConfig::default());
        let plus = cov.merge_trace(&t) > 0;
        seeds.push(Seed::from_trace(i as u32, bytes.clone(), None, Origin::Initial, plus, &t));
    }
    let ledger = AttemptLedger::default();
    let mut text = String::from("file,uncovered,score,terms\n");
    for ((name, _), s) in files.iter().zip(&seeds) {
        let sc = score_seed(s, &p, &reach, &ledger, &cov, decay);
        let terms: Vec<String> = sc
            .terms
            .iter()
            .map(|t| format!("{}->{}:L={}:S={}", p.block_name(t.branch.site), if t.branch.dir { "then" } else { "else" }, t.labels, t.attempts))
            .collect();
        text.push_str(&format!("\"{name}\",{},{:.6},{}\n", sc.n(), sc.score, terms.join(" ")));
    }
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

fn run(out: &mut dyn Write, err: &mut dyn Write, program: &Path, args: &CampaignArgs, dir: Option<PathBuf>, verbose: u8) -> Result<(), CliError> {
    let cfg = args.config()?;
    let planted = args.planted()?;
    let p = load_program(program)?;
    let (labels, reach) = analysis(&p);
    let mut c = Campaign::new(&p, &labels, &reach, cfg).with_planted(planted);
    let stdout = io_err(Path::new("<stdout>"));
    while !c.finished() {
        let s = c.step();
        let line = serde_json::to_string(&s).expect("stats serialize");
        writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))?;
        if verbose > 0 {
            let _ = writeln!(err, "round {}: {} edges, {} bugs, queue {}", s.round, s.edges, s.labels_triggered, c.fuzzer.queue.len());
        }
    }
    out.flush().map_err(stdout)?;
    let seed_dir = std::env::var_os(SEED_DIR_ENV).map(PathBuf::from).or_else(|| dir.as_ref().map(|d| d.join("queue")));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
        write_file(&d.join("stats.jsonl"), c.stats_jsonl())?;
        write_file(&d.join("bugs.csv"), bug_report_csv(&c.bugs))?;
        for b in c.bugs.values() {
            write_file(&d.join(b.witness_file()), &b.witness)?;
        }
    }
    if let Some(sd) = seed_dir {
        write_seed_store(&sd, &c.fuzzer.queue)?;
    }
    Ok(())
}

fn plotdata(out: &mut dyn Write, program: &Path, args: &CampaignArgs, policies: &str, reps: u64) -> Result<(), CliError> {
    let base = args.config()?;
    let planted = args.planted()?;
    let policies: Vec<Policy> = policies
        .split(',')
        .map(|s| s.trim().parse().map_err(|e: crate::coordinator::UnknownPolicy| CliError::Usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    let p = load_program(program)?;
    let (labels, reach) = analysis(&p);
    let mut text = String::from("policy,rep,round,labels_triggered,planted_triggered\n");
    for &policy in &policies {
        for rep in 0..reps {
            let cfg = CampaignConfig { policy, rng_seed: base.rng_seed + rep, ..base.clone() };
            let mut c = Campaign::new(&p, &labels, &reach, cfg).with_planted(planted.iter().copied());
            for s in c.run() {
                text.push_str(&format!("{policy},{rep},{},{},{}\n", s.round, s.labels_triggered, s.planted_triggered));
            }
        }
    }
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

fn gen(mut spec: BenchSpec, plants: &[String], infeasible: bool, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if !plants.is_empty() {
        spec.plants = plants.iter().map(|s| parse_plant(s)).collect::<Result<_, _>>()?;
    }
    let bench = if infeasible { benchgen::plant_infeasible(&spec)? } else { benchgen::generate(&spec)? };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("program.ir"), &bench.text)?;
    write_file(&dir.join("manifest.csv"), bench.manifest_csv())?;
    let _ = writeln!(
        out,
        "wrote {} ({} plants, dense handler selector {}{})",
        dir.display(),
        bench.plants.len(),
        bench.dense.selector,
        bench.infeasible.first().map(|l| format!(", infeasible label {l}")).unwrap_or_default()
    );
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Analyze { program, labels, trim, reach } => analyze(out, &program, labels, trim, reach),
        Cmd::Gen { seed, sparse, skew, sparse_labels, blocks, icall_fraction, plants, infeasible, out: dir } => {
            let spec = BenchSpec {
                rng_seed: seed,
                sparse_regions: sparse,
                density_skew: skew,
                sparse_labels,
                blocks_per_region: blocks,
                icall_fraction,
                ..Default::default()
            };
            gen(spec, &plants, infeasible, &dir, out)
        }
        Cmd::Replay { program, seed } => replay(out, &program, &seed),
        Cmd::Score { program, seeds, decay } => score(out, &program, seeds, decay),
        Cmd::Run { program, campaign, out: dir } => run(out, err, &program, &campaign, dir, cli.verbose),
        Cmd::Plotdata { program, campaign, policies, reps } => plotdata(out, &program, &campaign, &policies, reps),
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr());
    main_with(std::env::args_os(), &mut out, &mut err)
}
