//! Synthetic benchmark programs with planted bugs and their ground truth.
//!
//! Layout of a generated program's input: byte 0 selects a handler, byte 1
//! sets a small loop count, and the rest is a sequence of 4-byte slots
//! (handler guards, handler data, plants). Each handler sits behind a
//! 32-bit magic guard; one handler is label-dense, the others are sparse.
//! A plant is an out-of-bounds load into a one-element array whose index is
//! the truth value of a magic comparison, so the load is reached on every
//! path through its block but violates only when the magic matches.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::interp::{run_concrete, ExecConfig};
use crate::ir::{parse_program, BlockRef, FuncId, IrError, Program, Site};
use crate::labels::{place_labels, LabelId, LabelSet};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("infeasible benchmark spec: {0}")]
    Infeasible(String),
    #[error("generated program failed validation: {0}")]
    Invalid(#[from] IrError),
    #[error("ground truth for bug {0} does not certify")]
    Uncertified(LabelId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlantKind {
    /// One 32-bit little-endian magic word.
    Magic32,
    /// Chained comparisons of this many consecutive bytes (2..=4).
    ByteChain(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Region {
    /// Straight-line code in `main`, before dispatch.
    Entry,
    Dense,
    /// Sparse handler `k` (0-based among the sparse handlers).
    Sparse(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlantSpec {
    pub kind: PlantKind,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub rng_seed: u64,
    /// Number of label-sparse handlers; one dense handler is always added.
    pub sparse_regions: usize,
    /// Dense region labels per sparse region label.
    pub density_skew: u32,
    /// Filler labels in each sparse region.
    pub sparse_labels: usize,
    /// Straight-line blocks each handler body is split into.
    pub blocks_per_region: usize,
    /// Fraction of handler dispatches made through the function table.
    pub icall_fraction: f64,
    pub plants: Vec<PlantSpec>,
    pub max_input_len: u32,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            sparse_regions: 7,
            density_skew: 10,
            sparse_labels: 2,
            blocks_per_region: 2,
            icall_fraction: 0.25,
            plants: vec![
                PlantSpec { kind: PlantKind::Magic32, region: Region::Entry },
                PlantSpec { kind: PlantKind::Magic32, region: Region::Dense },
                PlantSpec { kind: PlantKind::ByteChain(4), region: Region::Dense },
                PlantSpec { kind: PlantKind::Magic32, region: Region::Sparse(0) },
            ],
            max_input_len: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantRecord {
    pub bug_id: LabelId,
    pub kind: PlantKind,
    pub region: Region,
    pub offset: u32,
    /// Bytes the input must hold at `offset`.
    pub magic: Vec<u8>,
    /// A triggering input.
    pub input: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionInfo {
    pub region: Region,
    pub func: FuncId,
    pub selector: u8,
    pub guard_offset: u32,
    pub guard_magic: [u8; 4],
    /// Block ending in the guard branch.
    pub guard: BlockRef,
    /// First block behind the guard.
    pub body: BlockRef,
}

impl RegionInfo {
    /// Zero input that passes this handler's guard.
    pub fn entry_input(&self, input_len: u32) -> Vec<u8> {
        let mut v = vec![0; input_len as usize];
        v[0] = self.selector;
        let o = self.guard_offset as usize;
        v[o..o + 4].copy_from_slice(&self.guard_magic);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Bench {
    pub text: String,
    pub program: Program,
    /// All labels, untrimmed.
    pub labels: LabelSet,
    pub plants: Vec<PlantRecord>,
    pub dense: RegionInfo,
    pub sparse: Vec<RegionInfo>,
    /// Labels that no input can trigger.
    pub infeasible: Vec<LabelId>,
}

impl Bench {
    pub fn planted(&self) -> BTreeSet<LabelId> {
        self.plants.iter().map(|p| p.bug_id).collect()
    }

    /// Region a label lives in.
    pub fn region_of(&self, label: LabelId) -> Option<Region> {
        let func = self.labels.get(label)?.site.func;
        if func == self.dense.func {
            return Some(Region::Dense);
        }
        Some(self.sparse.iter().find(|r| r.func == func).map_or(Region::Entry, |r| r.region))
    }

    pub fn region(&self, r: Region) -> Option<&RegionInfo> {
        match r {
            Region::Dense => Some(&self.dense),
            Region::Sparse(k) => self.sparse.get(k),
            Region::Entry => None,
        }
    }

    /// `bug_id,offset,magic_hex,input_hex`; magic bytes are in input order.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("bug_id,offset,magic_hex,input_hex\n");
        for p in &self.plants {
            let _ = writeln!(out, "{},{},{},{}", p.bug_id, p.offset, hex(&p.magic), hex(&p.input));
        }
        out
    }

    /// Replays every ground-truth input: it must violate its own plant and no
    /// other.
    pub fn certify(&self) -> Result<(), BenchError> {
        let planted = self.planted();
        for p in &self.plants {
            let t = run_concrete(&self.program, &self.labels, &p.input, &ExecConfig::default());
            let hit: BTreeSet<LabelId> = t.violations.iter().map(|v| v.label).filter(|l| planted.contains(l)).collect();
            if hit != BTreeSet::from([p.bug_id]) {
                return Err(BenchError::Uncertified(p.bug_id));
            }
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Magic bytes avoid 0x00, 0xFF-like values and the 0x7F/0x80 boundary so no
/// interesting-value mutation produces them.
fn magic_byte(rng: &mut ChaCha8Rng) -> u8 {
    loop {
        let b = rng.gen_range(0x10u8..=0xEF);
        if b != 0x7F && b != 0x80 {
            return b;
        }
    }
}

fn magic_word(rng: &mut ChaCha8Rng) -> [u8; 4] {
    std::array::from_fn(|_| magic_byte(rng))
}

/// Text of one function under construction.
struct FnText {
    name: String,
    blocks: Vec<(String, Vec<String>, String)>,
}

impl FnText {
    fn new(name: &str) -> Self {
        Self { name: name.into(), blocks: Vec::new() }
    }

    fn open(&mut self, name: &str) {
        self.blocks.push((name.into(), Vec::new(), String::new()));
    }

    fn push(&mut self, instr: String) -> usize {
        let b = self.blocks.last_mut().expect("open block");
        b.1.push(instr);
        b.1.len() - 1
    }

    fn close(&mut self, term: String) {
        self.blocks.last_mut().expect("open block").2 = term;
    }

    fn block_name(&self) -> String {
        self.blocks.last().expect("open block").0.clone()
    }

    fn render(&self, out: &mut String) {
        let _ = writeln!(out, "func {}(entry={}) {{", self.name, self.blocks[0].0);
        for (name, instrs, term) in &self.blocks {
            let _ = writeln!(out, "  {name}:");
            for i in instrs {
                let _ = writeln!(out, "    {i}");
            }
            let _ = writeln!(out, "    {term}");
        }
        out.push_str("}\n");
    }
}

/// Where an instruction was emitted, by name.
#[derive(Clone, Debug)]
struct SiteName {
    func: String,
    block: String,
    index: usize,
}

struct PendingPlant {
    kind: PlantKind,
    region: Region,
    offset: u32,
    magic: Vec<u8>,
    site: SiteName,
}

struct Gen {
    rng: ChaCha8Rng,
    next_slot: u32,
    fresh: usize,
}

impl Gen {
    fn slot(&mut self) -> u32 {
        let o = 2 + 4 * self.next_slot;
        self.next_slot += 1;
        o
    }

    fn fresh(&mut self, stem: &str) -> String {
        self.fresh += 1;
        format!("{stem}{}", self.fresh)
    }

    /// One easily triggerable label reading the 4-byte data slot at `d`.
    fn filler(&mut self, f: &mut FnText, d: u32) {
        let w = self.fresh("w");
        let y = self.fresh("y");
        match self.rng.gen_range(0..4) {
            0 => {
                let c: u32 = self.rng.gen_range(0x8000_0000..=0xF000_0000);
                f.push(format!("{w} = in.u32 {d}"));
                f.push(format!("{y} = add.u32 {w}, {c:#x}"));
            }
            1 => {
                let c: u32 = self.rng.gen_range(0x4000_0000..=0x7FFF_FFF0);
                f.push(format!("{w} = in.u32 {d}"));
                f.push(format!("{y} = add.s32 {w}, {c:#x}"));
            }
            2 => {
                let a = self.fresh("a");
                let k = d + self.rng.gen_range(0..4);
                f.push(format!("{w} = in.u32 {d}"));
                f.push(format!("{a} = in.u8 {k}"));
                f.push(format!("{a}_32 = zext.u32 {a}"));
                f.push(format!("{y} = shl.u32 {w}, {a}_32"));
            }
            _ => {
                let arr = self.fresh("arr");
                let len = self.rng.gen_range(16..=64);
                let k = d + self.rng.gen_range(0..4);
                f.push(format!("{arr} = arr.alloc.u8 {len}"));
                f.push(format!("{w} = in.u8 {k}"));
                f.push(format!("{w}_32 = zext.u32 {w}"));
                f.push(format!("{y} = arr.load {arr}, {w}_32"));
            }
        }
    }

    fn plant(&mut self, f: &mut FnText, kind: PlantKind, region: Region) -> PendingPlant {
        let offset = self.slot();
        let p = self.fresh("p");
        let (magic, truth) = match kind {
            PlantKind::Magic32 => {
                let m = magic_word(&mut self.rng);
                f.push(format!("{p}_x = in.u32 {offset}"));
                f.push(format!("{p}_c = cmp.eq {p}_x, {:#010x}", u32::from_le_bytes(m)));
                (m.to_vec(), format!("{p}_c"))
            }
            PlantKind::ByteChain(n) => {
                let m: Vec<u8> = (0..n).map(|_| magic_byte(&mut self.rng)).collect();
                for (i, b) in m.iter().enumerate() {
                    f.push(format!("{p}_b{i} = in.u8 {}", offset + i as u32));
                    f.push(format!("{p}_c{i} = cmp.eq {p}_b{i}, {b:#04x}"));
                    if i > 0 {
                        let prev = if i == 1 { format!("{p}_c0") } else { format!("{p}_t") };
                        f.push(format!("{p}_t = and.u1 {prev}, {p}_c{i}"));
                    }
                }
                (m, format!("{p}_t"))
            }
        };
        f.push(format!("{p}_i = zext.u32 {truth}"));
        f.push(format!("{p}_a = arr.alloc.u8 1"));
        let index = f.push(format!("{p}_v = arr.load {p}_a, {p}_i"));
        PendingPlant { kind, region, offset, magic, site: SiteName { func: f.name.clone(), block: f.block_name(), index } }
    }
}

struct HandlerPlan {
    region: Region,
    selector: u8,
    fillers: usize,
    plants: Vec<PlantKind>,
    guard_offset: u32,
    data_offset: u32,
    guard_magic: [u8; 4],
    via_table: bool,
}

fn validate(spec: &BenchSpec) -> Result<(), BenchError> {
    let bad = |m: &str| Err(BenchError::Infeasible(m.into()));
    if spec.sparse_regions == 0 {
        return bad("at least one sparse region is required");
    }
    if spec.sparse_regions + 1 > 128 {
        return bad("more handlers than selector values");
    }
    if spec.density_skew == 0 || spec.sparse_labels == 0 || spec.blocks_per_region == 0 {
        return bad("density skew, sparse labels and blocks per region must be positive");
    }
    if !(0.0..=1.0).contains(&spec.icall_fraction) {
        return bad("indirect-call fraction must be in [0, 1]");
    }
    for p in &spec.plants {
        if let PlantKind::ByteChain(n) = p.kind {
            if !(2..=4).contains(&n) {
                return bad("byte chains hold 2 to 4 bytes");
            }
        }
        if let Region::Sparse(k) = p.region {
            if k >= spec.sparse_regions {
                return Err(BenchError::Infeasible(format!("plant in sparse region {k} of {}", spec.sparse_regions)));
            }
        }
    }
    let slots = 2 * (spec.sparse_regions as u64 + 1) + spec.plants.len() as u64 + 1;
    if 2 + 4 * slots > spec.max_input_len as u64 {
        return Err(BenchError::Infeasible(format!(
            "{} plants need {} input bytes, more than the {} available",
            spec.plants.len(),
            2 + 4 * slots,
            spec.max_input_len
        )));
    }
    Ok(())
}

/// Generates a program and its ground-truth manifest; deterministic in the spec.
pub fn generate(spec: &BenchSpec) -> Result<Bench, BenchError> {
    build(spec, false)
}

/// Like [`generate`], plus one label in `main` whose trigger condition
/// contradicts a constant guard that dominates it.
pub fn plant_infeasible(spec: &BenchSpec) -> Result<Bench, BenchError> {
    build(spec, true)
}

fn build(spec: &BenchSpec, infeasible: bool) -> Result<Bench, BenchError> {
    validate(spec)?;
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(spec.rng_seed), next_slot: 0, fresh: 0 };
    let handlers = spec.sparse_regions + 1;
    let dense_sel = g.rng.gen_range(1..handlers) as u8;

    let mut per_sparse = vec![0usize; spec.sparse_regions];
    for p in &spec.plants {
        if let Region::Sparse(k) = p.region {
            per_sparse[k] += 1;
        }
    }
    let sparse_max = spec.sparse_labels + per_sparse.iter().max().copied().unwrap_or(0);
    let dense_plants = spec.plants.iter().filter(|p| p.region == Region::Dense).count();
    let dense_fillers = (spec.density_skew as usize * sparse_max).saturating_sub(dense_plants).max(spec.sparse_labels);

    let mut plans = Vec::new();
    let mut sparse_k = 0;
    for sel in 0..handlers as u8 {
        let region = if sel == dense_sel {
            Region::Dense
        } else {
            sparse_k += 1;
            Region::Sparse(sparse_k - 1)
        };
        let plants = spec.plants.iter().filter(|p| p.region == region).map(|p| p.kind).collect();
        plans.push(HandlerPlan {
            region,
            selector: sel,
            fillers: if region == Region::Dense { dense_fillers } else { spec.sparse_labels },
            plants,
            guard_offset: g.slot(),
            data_offset: g.slot(),
            guard_magic: magic_word(&mut g.rng),
            via_table: g.rng.gen_bool(spec.icall_fraction),
        });
    }

    let mut pending = Vec::new();
    let mut funcs = Vec::new();
    for plan in &plans {
        let name = format!("handler_{}", plan.selector);
        let mut f = FnText::new(&name);
        f.open("guard");
        f.push(format!("gw = in.u32 {}", plan.guard_offset));
        f.push(format!("gc = cmp.eq gw, {:#010x}", u32::from_le_bytes(plan.guard_magic)));
        f.close("br gc, body0, done".into());
        // spread fillers and plants over the body blocks
        let nb = spec.blocks_per_region;
        let mut items: Vec<Option<PlantKind>> = (0..plan.fillers).map(|_| None).chain(plan.plants.iter().copied().map(Some)).collect();
        items.shuffle(&mut g.rng);
        let per = items.len().div_ceil(nb).max(1);
        for b in 0..nb {
            f.open(&format!("body{b}"));
            for item in items.iter().skip(b * per).take(per) {
                match item {
                    None => g.filler(&mut f, plan.data_offset),
                    Some(kind) => pending.push(g.plant(&mut f, *kind, plan.region)),
                }
            }
            f.close(if b + 1 < nb { format!("jmp body{}", b + 1) } else { "jmp done".into() });
        }
        f.open("done");
        f.close("ret".into());
        funcs.push(f);
    }

    let mut main = FnText::new("main");
    main.open("start");
    for p in spec.plants.iter().filter(|p| p.region == Region::Entry) {
        pending.push(g.plant(&mut main, p.kind, Region::Entry));
    }
    let mut infeasible_site = None;
    if infeasible {
        let o = g.slot();
        let bound = g.rng.gen_range(2u32..16);
        let k: u32 = g.rng.gen_range(0x1000_0000..=0x8000_0000);
        main.push(format!("ix = in.u32 {o}"));
        main.push(format!("ic = cmp.ult ix, {bound}"));
        main.close("br ic, narrow, setup".into());
        main.open("narrow");
        let index = main.push(format!("iy = add.u32 ix, {k:#x}"));
        infeasible_site = Some(SiteName { func: "main".into(), block: "narrow".into(), index });
        main.close("jmp setup".into());
        main.open("setup");
    }
    main.push("i = const.u8 0".into());
    main.push("n = in.u8 1".into());
    main.push("n = and.u8 n, 15".into());
    main.close("jmp loop".into());
    main.open("loop");
    main.push("lc = cmp.ult i, n".into());
    main.close("br lc, step, dispatch".into());
    main.open("step");
    main.push("i = add.u8 i, 1".into());
    main.close("jmp loop".into());
    main.open("dispatch");
    let mask = (handlers as u32).next_power_of_two() - 1;
    main.push("s = in.u8 0".into());
    main.push(format!("h = and.u8 s, {mask}"));
    main.close("jmp test0".into());
    let table: Vec<&HandlerPlan> = plans.iter().filter(|p| p.via_table).collect();
    for (k, plan) in plans.iter().enumerate() {
        main.open(&format!("test{k}"));
        main.push(format!("t{k} = cmp.eq h, {}", plan.selector));
        let next = if k + 1 < plans.len() { format!("test{}", k + 1) } else { "exit".into() };
        main.close(format!("br t{k}, call{k}, {next}"));
        main.open(&format!("call{k}"));
        match table.iter().position(|p| p.selector == plan.selector) {
            Some(idx) => {
                main.push(format!("ti{k} = const.u32 {idx}"));
                main.push(format!("icall ti{k}"));
            }
            None => {
                main.push(format!("call handler_{}", plan.selector));
            }
        }
        main.close("jmp exit".into());
    }
    main.open("exit");
    main.close("ret".into());

    let input_len = 2 + 4 * g.next_slot;
    let mut text = format!("inputlen {input_len}\n");
    if !table.is_empty() {
        let names: Vec<String> = table.iter().map(|p| format!("handler_{}", p.selector)).collect();
        let _ = writeln!(text, "table {}", names.join(", "));
    }
    for f in &funcs {
        f.render(&mut text);
    }
    main.render(&mut text);

    let program = parse_program(&text)?;
    let labels = place_labels(&program);
    let label_at = |s: &SiteName| -> LabelId {
        let func = program.func_id(&s.func).expect("emitted function");
        let block = program.func(func).block_id(&s.block).expect("emitted block");
        labels.at_site(Site { func, block, index: s.index as u32 }).expect("plant sites carry labels").id
    };

    let region_info = |plan: &HandlerPlan| -> RegionInfo {
        let func = program.func_id(&format!("handler_{}", plan.selector)).expect("emitted handler");
        let f = program.func(func);
        RegionInfo {
            region: plan.region,
            func,
            selector: plan.selector,
            guard_offset: plan.guard_offset,
            guard_magic: plan.guard_magic,
            guard: BlockRef::new(func, f.block_id("guard").expect("guard block")),
            body: BlockRef::new(func, f.block_id("body0").expect("body block")),
        }
    };
    let dense = region_info(plans.iter().find(|p| p.region == Region::Dense).expect("dense handler"));
    let mut sparse: Vec<RegionInfo> = plans.iter().filter(|p| p.region != Region::Dense).map(region_info).collect();
    sparse.sort_by_key(|r| r.region);

    let plants = pending
        .iter()
        .map(|p| {
            let mut input = match p.region {
                Region::Entry => vec![0; input_len as usize],
                Region::Dense => dense.entry_input(input_len),
                Region::Sparse(k) => sparse[k].entry_input(input_len),
            };
            let o = p.offset as usize;
            input[o..o + p.magic.len()].copy_from_slice(&p.magic);
            PlantRecord { bug_id: label_at(&p.site), kind: p.kind, region: p.region, offset: p.offset, magic: p.magic.clone(), input }
        })
        .collect();
    let infeasible = infeasible_site.iter().map(label_at).collect();
    let bench = Bench { text, program, labels, plants, dense, sparse, infeasible };
    bench.certify()?;
    Ok(bench)
}

/// A two-byte-input program: a random guard on the 16-bit input splits into
/// two blocks, each holding a few labels over the input. Small enough to
/// enumerate every input.
pub fn tiny(rng_seed: u64) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut f = FnText::new("main");
    f.open("b0");
    f.push("x = in.u16 0".into());
    f.push("lo = in.u8 0".into());
    f.push("hi = in.u8 1".into());
    let pred = ["eq", "ne", "ult", "ule", "slt", "sle"][rng.gen_range(0..6)];
    let g: u16 = rng.gen();
    f.push(format!("c = cmp.{pred} x, {g}"));
    f.close("br c, b1, b2".into());
    for b in ["b1", "b2"] {
        f.open(b);
        for j in 0..rng.gen_range(1..=3) {
            let y = format!("{b}_y{j}");
            match rng.gen_range(0..6) {
                0 => f.push(format!("{y} = add.u16 x, {}", rng.gen::<u16>())),
                1 => f.push(format!("{y} = add.s16 x, {}", rng.gen::<u16>())),
                2 => f.push(format!("{y} = sub.u16 x, {}", rng.gen::<u16>())),
                3 => f.push(format!("{y} = mul.u8 lo, {}", rng.gen_range(2u8..=255))),
                4 => f.push(format!("{y} = shl.u8 lo, hi")),
                _ => {
                    let a = format!("{b}_a{j}");
                    f.push(format!("{a} = arr.alloc.u8 {}", rng.gen_range(1..=255)));
                    f.push(format!("{b}_i{j} = zext.u32 hi"));
                    f.push(format!("{y} = arr.load {a}, {b}_i{j}"))
                }
            };
        }
        f.close("jmp b3".into());
    }
    f.open("b3");
    f.close("ret".into());
    let mut text = String::from("inputlen 2\n");
    f.render(&mut text);
    parse_program(&text).expect("tiny programs are well formed")
}
