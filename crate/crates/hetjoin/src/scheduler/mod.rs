//! Plan search and execution across the two modeled devices.
//!
//! `search_plan` picks per-step splits with the cost model, `prepare` runs
//! the material work (real tables, partitions, and emitted pairs, mutated by
//! two device worker threads), and `simulate_plan` replays the recorded
//! per-item workloads on the logical timeline. Material results and logical
//! times are both deterministic for fixed seeds: workload weights are
//! order-independent functions of the final structures.

pub mod search;
pub mod timeline;

use std::sync::Arc;

use thiserror::Error;

use crate::arena::{Arena, ArenaError, GroupAlloc, DEFAULT_BLOCK_SIZE};
use crate::costmodel::{ModelEnv, SeriesStats};
use crate::device::{
    canned_profiles, divergence_metric, simulate_step, transfer_time, DeviceProfile, TransferLink,
};
use crate::hashtable::{default_bucket_count, HashTable, TableLayout};
use crate::relation::Relation;
use crate::steps::{
    self, build_series_work, group_by_workload, JoinResult, JoinStream, Ownership, PairWork,
    SeriesWork, StepId,
};

use timeline::{SeriesEnv, StepTime};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error("handoff deadlock: {0}")]
    HandoffDeadlock(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Shj,
    Phj,
}

impl Algo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Shj => "shj",
            Algo::Phj => "phj",
        }
    }

    pub fn parse(s: &str) -> Option<Algo> {
        match s {
            "shj" => Some(Algo::Shj),
            "phj" => Some(Algo::Phj),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    CpuOnly,
    GpuOnly,
    Offload,
    DataDivide,
    Pipelined,
    BasicUnit,
    CoarsePipelined,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::CpuOnly,
        Scheme::GpuOnly,
        Scheme::Offload,
        Scheme::DataDivide,
        Scheme::Pipelined,
        Scheme::BasicUnit,
        Scheme::CoarsePipelined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::CpuOnly => "cpu",
            Scheme::GpuOnly => "gpu",
            Scheme::Offload => "ol",
            Scheme::DataDivide => "dd",
            Scheme::Pipelined => "pl",
            Scheme::BasicUnit => "basicunit",
            Scheme::CoarsePipelined => "coarsepl",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        Scheme::ALL.iter().copied().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableMode {
    Shared,
    Separate,
}

impl TableMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TableMode::Shared => "shared",
            TableMode::Separate => "separate",
        }
    }

    pub fn parse(s: &str) -> Option<TableMode> {
        match s {
            "shared" => Some(TableMode::Shared),
            "separate" => Some(TableMode::Separate),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchMode {
    Coupled,
    Discrete,
}

impl ArchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchMode::Coupled => "coupled",
            ArchMode::Discrete => "discrete",
        }
    }

    pub fn parse(s: &str) -> Option<ArchMode> {
        match s {
            "coupled" => Some(ArchMode::Coupled),
            "discrete" => Some(ArchMode::Discrete),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Partition,
    Build,
    Probe,
    PairJoin,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Partition => "partition",
            Phase::Build => "build",
            Phase::Probe => "probe",
            Phase::PairJoin => "pairjoin",
        }
    }
}

/// One step series in execution order.
#[derive(Clone, Debug)]
pub struct SeriesSpec {
    pub label: String,
    pub phase: Phase,
    pub steps: Vec<StepId>,
    /// Input is a fresh relation (dispatch transfer applies in discrete
    /// mode) rather than the previous series' output.
    pub fresh_input: bool,
}

/// Engine configuration; everything a run needs besides the relations.
#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub algo: Algo,
    pub scheme: Scheme,
    pub table_mode: TableMode,
    pub arch: ArchMode,
    pub pass_bits: u32,
    pub passes: u32,
    pub delta: f64,
    pub block_size: usize,
    pub groups: usize,
    pub num_buckets: Option<u32>,
    pub handoff_cap_blocks: usize,
    pub chunk_size: usize,
    pub exhaustive_search: bool,
    pub search_budget: u64,
    pub arena_capacity: Option<usize>,
    pub hash_seed: u32,
    pub cpu: DeviceProfile,
    pub gpu: DeviceProfile,
}

impl EngineConfig {
    pub fn new(algo: Algo, scheme: Scheme) -> Self {
        let (cpu, gpu) = canned_profiles();
        EngineConfig {
            algo,
            scheme,
            table_mode: TableMode::Shared,
            arch: ArchMode::Coupled,
            pass_bits: 6,
            passes: 2,
            delta: 0.02,
            block_size: DEFAULT_BLOCK_SIZE,
            groups: 1,
            num_buckets: None,
            handoff_cap_blocks: 1 << 16,
            chunk_size: 1 << 14,
            exhaustive_search: false,
            search_budget: 200_000_000,
            arena_capacity: None,
            hash_seed: 0x9747_b28c,
            cpu,
            gpu,
        }
    }

    pub fn link(&self) -> TransferLink {
        match self.arch {
            ArchMode::Coupled => TransferLink::disabled(),
            ArchMode::Discrete => TransferLink::default_discrete(),
        }
    }

    pub fn model_env(&self) -> ModelEnv {
        ModelEnv::new(self.cpu.clone(), self.gpu.clone(), self.link())
    }

    fn effective_passes(&self) -> u32 {
        match self.algo {
            Algo::Shj => 0,
            Algo::Phj => self.passes,
        }
    }

    fn partitions(&self) -> u32 {
        1u32 << (self.pass_bits * self.effective_passes())
    }

    fn handoff_cap_items(&self) -> usize {
        self.handoff_cap_blocks.saturating_mul(self.block_size) / 8
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.scheme == Scheme::CoarsePipelined && self.algo == Algo::Shj {
            return Err(EngineError::Config(
                "the coarse step definition schedules partition pairs and needs the partitioned algorithm".into(),
            ));
        }
        if self.pass_bits * self.effective_passes() > 24 {
            return Err(EngineError::Config("too many radix bits".into()));
        }
        if self.delta <= 0.0 || self.delta > 1.0 {
            return Err(EngineError::Config("delta must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Step series in execution order for this configuration.
    pub fn series_specs(&self) -> Vec<SeriesSpec> {
        let mut specs = Vec::new();
        for (rel, label) in [("r", "build side"), ("s", "probe side")] {
            let _ = label;
            for pass in 1..=self.effective_passes() {
                specs.push(SeriesSpec {
                    label: format!("partition-{rel}-pass{pass}"),
                    phase: Phase::Partition,
                    steps: StepId::PARTITION.to_vec(),
                    fresh_input: pass == 1,
                });
            }
        }
        if self.scheme == Scheme::CoarsePipelined {
            specs.push(SeriesSpec {
                label: "pairjoin".into(),
                phase: Phase::PairJoin,
                steps: Vec::new(),
                fresh_input: self.effective_passes() == 0,
            });
        } else {
            specs.push(SeriesSpec {
                label: "build".into(),
                phase: Phase::Build,
                steps: StepId::BUILD.to_vec(),
                fresh_input: self.algo == Algo::Shj,
            });
            specs.push(SeriesSpec {
                label: "probe".into(),
                phase: Phase::Probe,
                steps: StepId::PROBE.to_vec(),
                fresh_input: self.algo == Algo::Shj,
            });
        }
        specs
    }
}

/// A resolved execution plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub scheme: Scheme,
    pub table_mode: TableMode,
    /// Per series (in `series_specs` order), per step: CPU share. The pair
    /// join series of the coarse scheme has a single entry.
    pub ratios: Vec<Vec<f64>>,
    pub chunk_size: Option<usize>,
}

impl Plan {
    pub fn single_device(cfg: &EngineConfig, cpu: bool) -> Plan {
        let r = if cpu { 1.0 } else { 0.0 };
        Plan {
            scheme: if cpu { Scheme::CpuOnly } else { Scheme::GpuOnly },
            table_mode: cfg.table_mode,
            ratios: cfg
                .series_specs()
                .iter()
                .map(|s| vec![r; s.steps.len().max(1)])
                .collect(),
            chunk_size: None,
        }
    }

    /// Flat text form: scheme, table mode, chunk size, then one
    /// semicolon-separated ratio line per series.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scheme={}\n", self.scheme.as_str()));
        out.push_str(&format!("table_mode={}\n", self.table_mode.as_str()));
        if let Some(c) = self.chunk_size {
            out.push_str(&format!("chunk_size={c}\n"));
        }
        for r in &self.ratios {
            let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("ratios={}\n", line.join(";")));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Plan, EngineError> {
        let mut scheme = None;
        let mut table_mode = TableMode::Shared;
        let mut chunk_size = None;
        let mut ratios = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EngineError::Config(format!("bad plan line {line:?}")))?;
            match k {
                "scheme" => {
                    scheme = Some(Scheme::parse(v).ok_or_else(|| {
                        EngineError::Config(format!("unknown scheme {v:?}"))
                    })?)
                }
                "table_mode" => {
                    table_mode = TableMode::parse(v).ok_or_else(|| {
                        EngineError::Config(format!("unknown table mode {v:?}"))
                    })?
                }
                "chunk_size" => {
                    chunk_size = Some(v.parse().map_err(|_| {
                        EngineError::Config(format!("bad chunk size {v:?}"))
                    })?)
                }
                "ratios" => {
                    let parsed: Result<Vec<f64>, _> = v.split(';').map(|x| x.parse()).collect();
                    ratios.push(parsed.map_err(|_| {
                        EngineError::Config(format!("bad ratio line {v:?}"))
                    })?);
                }
                _ => return Err(EngineError::Config(format!("unknown plan key {k:?}"))),
            }
        }
        Ok(Plan {
            scheme: scheme.ok_or_else(|| EngineError::Config("plan lacks a scheme".into()))?,
            table_mode,
            ratios,
            chunk_size,
        })
    }
}

/// Planner-side statistics for each series.
pub fn estimate_stats(cfg: &EngineConfig, n_build: usize, n_probe: usize) -> Vec<SeriesStats> {
    let parts = cfg.partitions() as usize;
    let buckets = cfg
        .num_buckets
        .unwrap_or_else(|| default_bucket_count(n_build / parts) * parts as u32)
        .max(1);
    let load = n_build as f64 / buckets as f64;
    cfg.series_specs()
        .iter()
        .map(|spec| match spec.phase {
            Phase::Partition => {
                let x = if spec.label.contains("-r-") { n_build } else { n_probe };
                SeriesStats::estimate(&spec.steps, x, 1.0, 1.0)
            }
            Phase::Build => SeriesStats::estimate(&spec.steps, n_build, load, 1.0),
            Phase::Probe => SeriesStats::estimate(&spec.steps, n_probe, load, 1.0),
            Phase::PairJoin => SeriesStats::estimate(&[], 0, 1.0, 1.0),
        })
        .collect()
}

/// Estimated whole-device totals for the coarse pair-join series, assuming
/// uniform pair sizes.
fn coarse_totals_estimate(cfg: &EngineConfig, n_build: usize, n_probe: usize) -> (f64, f64) {
    let fused = |p: &DeviceProfile| {
        let b: f64 = StepId::BUILD.iter().map(|&s| p.unit_cost(s)).sum();
        let pr: f64 = StepId::PROBE.iter().map(|&s| p.unit_cost(s)).sum();
        (n_build as f64 * b + n_probe as f64 * pr) / p.slots()
    };
    (fused(&cfg.cpu), fused(&cfg.gpu))
}

/// Searches a plan for the configured scheme using planner estimates.
/// Returns the plan and its predicted total time.
pub fn search_plan(cfg: &EngineConfig, n_build: usize, n_probe: usize) -> (Plan, f64) {
    let specs = cfg.series_specs();
    let stats = estimate_stats(cfg, n_build, n_probe);
    let env = cfg.model_env();
    let mut ratios: Vec<Vec<f64>> = Vec::with_capacity(specs.len());
    let mut predicted = 0.0;

    match cfg.scheme {
        Scheme::CpuOnly | Scheme::GpuOnly => {
            let plan = Plan::single_device(cfg, cfg.scheme == Scheme::CpuOnly);
            let p = stats
                .iter()
                .zip(plan.ratios.iter())
                .filter(|(s, _)| !s.steps.is_empty())
                .map(|(s, r)| search::eval_series(s, r, &env))
                .sum();
            return (plan, p);
        }
        Scheme::DataDivide | Scheme::BasicUnit => {
            // One share per phase; the dynamic scheme reuses the moral
            // equivalent for reporting but schedules chunks at run time.
            for phase in [Phase::Partition, Phase::Build, Phase::Probe, Phase::PairJoin] {
                let members: Vec<&SeriesStats> = specs
                    .iter()
                    .zip(stats.iter())
                    .filter(|(sp, st)| sp.phase == phase && !st.steps.is_empty())
                    .map(|(_, st)| st)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let (r, t) = search::search_dd_phase(&members, cfg.delta, &env);
                predicted += t;
                for spec in specs.iter().filter(|sp| sp.phase == phase) {
                    ratios.push(vec![r; spec.steps.len()]);
                }
            }
        }
        Scheme::Offload => {
            for st in &stats {
                let (r, t) = search::search_ol_series(st, &env);
                predicted += t;
                ratios.push(r);
            }
        }
        Scheme::Pipelined => {
            for st in &stats {
                let out = search::search_pl_series(
                    st,
                    cfg.delta,
                    &env,
                    cfg.exhaustive_search,
                    cfg.search_budget,
                );
                predicted += out.predicted;
                ratios.push(out.ratios);
            }
        }
        Scheme::CoarsePipelined => {
            for (spec, st) in specs.iter().zip(stats.iter()) {
                if spec.phase == Phase::PairJoin {
                    let (tc, tg) = coarse_totals_estimate(cfg, n_build, n_probe);
                    let mut best = (0.0f64, f64::INFINITY);
                    for &r in &search::ratio_grid(cfg.delta) {
                        let t = (r * tc).max((1.0 - r) * tg);
                        if t < best.1 {
                            best = (r, t);
                        }
                    }
                    predicted += best.1;
                    ratios.push(vec![best.0]);
                } else {
                    let out = search::search_pl_series(
                        st,
                        cfg.delta,
                        &env,
                        cfg.exhaustive_search,
                        cfg.search_budget,
                    );
                    predicted += out.predicted;
                    ratios.push(out.ratios);
                }
            }
        }
    }

    (
        Plan {
            scheme: cfg.scheme,
            table_mode: cfg.table_mode,
            ratios,
            chunk_size: (cfg.scheme == Scheme::BasicUnit).then_some(cfg.chunk_size),
        },
        predicted,
    )
}

/// Greedy deterministic chunk assignment for the dynamic baseline, using
/// uniform per-item cost estimates. `true` entries go to the narrow device.
fn greedy_chunks(
    cfg: &EngineConfig,
    steps: &[StepId],
    x: usize,
    chunk: usize,
) -> Vec<bool> {
    let n_chunks = x.div_ceil(chunk.max(1));
    let unit = |p: &DeviceProfile| -> f64 {
        steps.iter().map(|&s| p.unit_cost(s)).sum::<f64>() / p.slots()
    };
    let (uc, ug) = (unit(&cfg.cpu), unit(&cfg.gpu));
    let link = cfg.link();
    let mut clock = [0.0f64; 2];
    let mut out = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let items = chunk.min(x - c * chunk);
        let tc = items as f64 * uc + cfg.cpu.sched_overhead_s;
        let mut tg = items as f64 * ug + cfg.gpu.sched_overhead_s;
        if link.enabled {
            tg += transfer_time(&link, items as f64 * 8.0);
        }
        let to_cpu = clock[0] + tc <= clock[1] + tg;
        if to_cpu {
            clock[0] += tc;
        } else {
            clock[1] += tg;
        }
        out.push(to_cpu);
    }
    out
}

/// One executed series: its spec, recorded workloads, and the ownership the
/// material pass used.
pub struct SeriesExec {
    pub spec: SeriesSpec,
    pub work: SeriesWork,
    pub chunk_assignment: Option<Vec<bool>>,
}

/// Material record of the coarse pair-join series.
pub struct CoarseExec {
    pub pair_work: Vec<PairWork>,
    pub split_pairs: usize,
}

/// Everything the material pass produced.
pub struct MaterializedJoin {
    pub series: Vec<SeriesExec>,
    pub coarse: Option<CoarseExec>,
    pub result: JoinResult,
    pub stats: Vec<SeriesStats>,
    pub matches: usize,
    pub merge_pairs: u64,
    pub grant_ops: u64,
    /// Items the wide device owned during the build, for table-return sizing.
    pub gpu_build_items: usize,
    /// Divergence of the probe key-search weights at the wide device's
    /// wavefront width, in executed order.
    pub probe_divergence: f64,
    pub schedulable_units: Option<usize>,
}

fn arena_capacity(cfg: &EngineConfig, n_build: usize, n_probe: usize) -> usize {
    if let Some(c) = cfg.arena_capacity {
        return c;
    }
    let passes = cfg.effective_passes();
    let part_chunks: usize = (1..=passes)
        .map(|p| (1usize << (cfg.pass_bits * p)) * cfg.block_size.max(64))
        .sum();
    let partitions = (n_build + n_probe) * 10 * passes.max(1) as usize + 2 * part_chunks;
    steps::join_arena_bytes(n_build, n_probe.max(n_build)) + partitions * 2 + (1 << 20)
}

fn bucket_layout(cfg: &EngineConfig, n_build: usize) -> TableLayout {
    let parts = cfg.partitions();
    let per_part = cfg
        .num_buckets
        .map(|b| (b / parts).max(1).next_power_of_two())
        .unwrap_or_else(|| default_bucket_count(n_build / parts as usize));
    if parts == 1 {
        TableLayout::simple(per_part, cfg.hash_seed)
    } else {
        TableLayout::partitioned(per_part, parts, cfg.pass_bits * cfg.effective_passes(), cfg.hash_seed)
    }
}

fn ownership_for<'a>(
    plan: &Plan,
    series_idx: usize,
    spec: &SeriesSpec,
    x: usize,
    assignment: Option<&'a Vec<bool>>,
    chunk: usize,
) -> Ownership<'a> {
    if let Some(a) = assignment {
        return Ownership::Chunks { assignment: a, chunk_size: chunk };
    }
    // Material ownership follows the ratio of the last mutating step.
    let r = plan.ratios[series_idx].last().copied().unwrap_or(1.0);
    let _ = spec;
    Ownership::Prefix((r * x as f64).floor() as usize)
}

/// Runs the material work for `plan`: partitions, tables (merged in
/// separate mode), probe emission, and per-item workload records.
pub fn prepare(
    cfg: &EngineConfig,
    plan: &Plan,
    build: &Relation,
    probe: &Relation,
) -> Result<MaterializedJoin, EngineError> {
    cfg.validate()?;
    let specs = cfg.series_specs();
    assert_eq!(plan.ratios.len(), specs.len(), "plan does not match the series layout");

    let common = Arc::new(Arena::new(arena_capacity(cfg, build.len(), probe.len()))?);
    let chunk = plan.chunk_size.unwrap_or(cfg.chunk_size).max(1);
    let dynamic = plan.scheme == Scheme::BasicUnit;

    let mut series: Vec<SeriesExec> = Vec::with_capacity(specs.len());
    let mut grant_ops = 0u64;

    // Partition passes for both relations.
    let mut streams: Vec<JoinStream> = Vec::new();
    let mut spec_iter = specs.iter().enumerate();
    for rel in [build, probe] {
        let mut stream = JoinStream {
            items: rel.pairs().collect(),
            radix_bits: 0,
            hash_seed: cfg.hash_seed,
        };
        for pass in 0..cfg.effective_passes() {
            let (idx, spec) = spec_iter.next().expect("partition series present");
            debug_assert_eq!(spec.phase, Phase::Partition);
            let assignment = dynamic
                .then(|| greedy_chunks(cfg, &spec.steps, stream.len(), chunk));
            let owner =
                ownership_for(plan, idx, spec, stream.len(), assignment.as_ref(), chunk);
            let bit_lo = pass * cfg.pass_bits;
            let parts = 1usize << (bit_lo + cfg.pass_bits);
            let out = steps::PartitionSet::new(
                common.clone(),
                parts,
                cfg.block_size.max(64),
                bit_lo + cfg.pass_bits,
                cfg.hash_seed,
            );
            let work = steps::run_partition_pass(
                &stream,
                &out,
                cfg.pass_bits,
                bit_lo,
                &owner,
                cfg.block_size,
            )?;
            stream = out.to_stream();
            series.push(SeriesExec { spec: spec.clone(), work, chunk_assignment: assignment });
        }
        streams.push(stream);
    }
    let probe_stream = streams.pop().unwrap();
    let build_stream = streams.pop().unwrap();

    let mut result;
    let matches: usize;
    let mut merge_pairs = 0u64;
    let mut gpu_build_items = 0usize;
    let mut probe_divergence = 0.0;
    let mut coarse = None;
    let mut schedulable_units = None;

    if plan.scheme == Scheme::CoarsePipelined {
        let (idx, spec) = spec_iter.next().expect("pair join series present");
        debug_assert_eq!(spec.phase, Phase::PairJoin);
        let parts = cfg.partitions() as usize;
        let bounds_of = |s: &JoinStream| {
            let mut bounds = vec![0usize; parts + 1];
            for &(k, _) in &s.items {
                bounds[s.part_of(k) as usize + 1] += 1;
            }
            for i in 1..=parts {
                bounds[i] += bounds[i - 1];
            }
            bounds
        };
        let bb = bounds_of(&build_stream);
        let pb = bounds_of(&probe_stream);
        let r = plan.ratios[idx].first().copied().unwrap_or(1.0);
        let split_pairs = (r * parts as f64).floor() as usize;
        let (res, pair_work) = steps::run_coarse_pairs(
            &build_stream,
            &bb,
            &probe_stream,
            &pb,
            split_pairs,
            &common,
            cfg.block_size,
        )?;
        matches = res.len();
        result = res;
        schedulable_units = Some(parts);
        coarse = Some(CoarseExec { pair_work, split_pairs });
        series.push(SeriesExec {
            spec: spec.clone(),
            work: SeriesWork {
                steps: Vec::new(),
                x: parts,
                weights: Vec::new(),
                model_x: Vec::new(),
                avg_weight: Vec::new(),
            },
            chunk_assignment: None,
        });
    } else {
        // Build phase.
        let (build_idx, build_spec) = spec_iter.next().expect("build series present");
        let layout = bucket_layout(cfg, build.len());
        let build_assignment = dynamic
            .then(|| greedy_chunks(cfg, &build_spec.steps, build_stream.len(), chunk));
        let owner = ownership_for(
            plan,
            build_idx,
            build_spec,
            build_stream.len(),
            build_assignment.as_ref(),
            chunk,
        );
        gpu_build_items = owner
            .items(1, build_stream.len())
            .iter()
            .map(|r| r.len())
            .sum();

        let table = match plan.table_mode {
            TableMode::Shared => {
                let t = HashTable::new(common.clone(), layout);
                steps::run_build([&t, &t], &build_stream, &owner, cfg.block_size)?;
                t
            }
            TableMode::Separate => {
                let cap = steps::join_arena_bytes(build.len(), 0) + (1 << 20);
                let cpu_arena = Arc::new(Arena::new(cap)?);
                let gpu_arena = Arc::new(Arena::new(cap)?);
                let t_cpu = HashTable::new(cpu_arena, layout);
                let t_gpu = HashTable::new(gpu_arena, layout);
                steps::run_build([&t_cpu, &t_gpu], &build_stream, &owner, cfg.block_size)?;
                let mut ga = GroupAlloc::new(t_cpu.arena(), cfg.block_size);
                grant_ops += t_gpu.arena().grant_ops();
                merge_pairs = t_cpu.merge_from(&mut ga, t_gpu)?;
                grant_ops += t_cpu.arena().grant_ops();
                t_cpu
            }
        };
        let build_work = build_series_work(&table, &build_stream);
        series.push(SeriesExec {
            spec: build_spec.clone(),
            work: build_work,
            chunk_assignment: build_assignment,
        });

        // Probe phase, optionally reordered by bucket workload.
        let (probe_idx, probe_spec) = spec_iter.next().expect("probe series present");
        let probe_stream = if cfg.groups > 1 {
            let measures: Vec<u32> = probe_stream
                .items
                .iter()
                .map(|&(k, _)| table.key_list_len(table.bucket_of(probe_stream.part_of(k), k)))
                .collect();
            let order = group_by_workload(&measures, cfg.groups);
            probe_stream.permuted(&order)
        } else {
            probe_stream
        };
        let probe_assignment = dynamic
            .then(|| greedy_chunks(cfg, &probe_spec.steps, probe_stream.len(), chunk));
        let owner = ownership_for(
            plan,
            probe_idx,
            probe_spec,
            probe_stream.len(),
            probe_assignment.as_ref(),
            chunk,
        );
        let outcome = steps::run_probe(&table, &probe_stream, &owner, cfg.block_size)?;
        matches = outcome.matches;
        result = outcome.result;
        if let Some(w) = &outcome.work.weights[2] {
            probe_divergence = divergence_metric(w, cfg.gpu.wavefront_width);
        }
        series.push(SeriesExec {
            spec: probe_spec.clone(),
            work: outcome.work,
            chunk_assignment: probe_assignment,
        });
    }

    grant_ops += common.grant_ops();

    // Series records were pushed partition-first; restore spec order.
    series.sort_by_key(|se| {
        specs.iter().position(|sp| sp.label == se.spec.label).unwrap_or(usize::MAX)
    });

    let stats = series
        .iter()
        .map(|se| SeriesStats::from_work(&se.work, &cfg.cpu, &cfg.gpu))
        .collect();

    result.pairs.sort_unstable();
    Ok(MaterializedJoin {
        series,
        coarse,
        result,
        stats,
        matches,
        merge_pairs,
        grant_ops,
        gpu_build_items,
        probe_divergence,
        schedulable_units,
    })
}

/// One series' accounted logical times.
#[derive(Clone, Debug)]
pub struct SeriesReport {
    pub label: String,
    pub phase: Phase,
    pub cpu: Vec<StepTime>,
    pub gpu: Vec<StepTime>,
    pub duration: f64,
    pub dispatch_transfer: f64,
    pub handoff_link: f64,
}

/// Logical-time account of one executed plan.
#[derive(Clone, Debug)]
pub struct ExecutionReport {
    pub series: Vec<SeriesReport>,
    pub merge_time: f64,
    pub return_transfer: f64,
    pub total: f64,
    pub cpu_busy: f64,
    pub gpu_busy: f64,
    pub stall_total: f64,
    pub transfer_total: f64,
    pub result_count: u64,
    pub matches: usize,
    pub grant_ops: u64,
    pub probe_divergence: f64,
    pub schedulable_units: Option<usize>,
}

impl ExecutionReport {
    pub fn phase_duration(&self, phase: Phase) -> f64 {
        let mut t: f64 = self
            .series
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| s.duration)
            .sum();
        if phase == Phase::Build {
            t += self.merge_time;
        }
        if phase == Phase::Probe || phase == Phase::PairJoin {
            t += self.return_transfer;
        }
        t
    }

    pub fn step_work(&self, step: StepId) -> f64 {
        self.series
            .iter()
            .flat_map(|s| s.cpu.iter().chain(s.gpu.iter()))
            .filter(|t| t.step == step)
            .map(|t| t.work)
            .sum()
    }
}

fn pair_cost(profile: &DeviceProfile, w: &PairWork) -> f64 {
    let per_build: f64 = [StepId::BuildHash, StepId::BuildHeader, StepId::BuildRidInsert]
        .iter()
        .map(|&s| profile.unit_cost(s))
        .sum();
    let per_probe: f64 =
        [StepId::ProbeHash, StepId::ProbeHeader].iter().map(|&s| profile.unit_cost(s)).sum();
    w.build_items as f64 * per_build
        + w.build_search as f64 * profile.unit_cost(StepId::BuildKeySearch)
        + w.probe_items as f64 * per_probe
        + w.probe_search as f64 * profile.unit_cost(StepId::ProbeKeySearch)
        + w.emitted as f64 * profile.unit_cost(StepId::ProbeEmit)
}

/// Replays the dynamic chunk schedule of one series: each device pulls its
/// pre-assigned chunks in order and runs the series' steps fused over them.
fn simulate_chunked(
    cfg: &EngineConfig,
    se: &SeriesExec,
    assignment: &[bool],
    chunk: usize,
    start: f64,
) -> (SeriesReport, f64, f64) {
    let link = cfg.link();
    let x = se.work.x;
    let mut clock = [start, start];
    let mut step_times: [Vec<StepTime>; 2] = [
        se.spec.steps.iter().map(|&s| StepTime { step: s, work: 0.0, stall: 0.0 }).collect(),
        se.spec.steps.iter().map(|&s| StepTime { step: s, work: 0.0, stall: 0.0 }).collect(),
    ];
    let mut transfer = 0.0f64;

    for (c, &to_cpu) in assignment.iter().enumerate() {
        let lo = c * chunk;
        if lo >= x {
            break;
        }
        let hi = ((c + 1) * chunk).min(x);
        let d = usize::from(!to_cpu);
        let profile = if d == 0 { &cfg.cpu } else { &cfg.gpu };
        let fused = (lo..hi).map(|i| {
            se.spec
                .steps
                .iter()
                .enumerate()
                .map(|(pos, &s)| profile.item_cost(s, se.work.weight(pos, i)))
                .sum::<f64>()
        });
        let t = simulate_step(profile, fused);
        // Attribute per-step work; lockstep divergence lands in stall.
        let mut attributed = 0.0;
        for (pos, &s) in se.spec.steps.iter().enumerate() {
            let w: f64 = (lo..hi)
                .map(|i| profile.item_cost(s, se.work.weight(pos, i)))
                .sum::<f64>()
                / profile.slots();
            step_times[d][pos].work += w;
            attributed += w;
        }
        step_times[d][0].stall += (t - attributed).max(0.0) + profile.sched_overhead_s;
        clock[d] += t + profile.sched_overhead_s;
        if d == 1 && link.enabled {
            let xf = transfer_time(&link, (hi - lo) as f64 * 8.0);
            clock[d] += xf;
            transfer += xf;
        }
    }

    let end = clock[0].max(clock[1]);
    let report = SeriesReport {
        label: se.spec.label.clone(),
        phase: se.spec.phase,
        cpu: step_times[0].clone(),
        gpu: step_times[1].clone(),
        duration: end - start,
        dispatch_transfer: transfer,
        handoff_link: 0.0,
    };
    (report, clock[0] - start, clock[1] - start)
}

/// Replays `plan` over the material record, producing the logical-time
/// report. Barriers separate series; in separate mode the wide device's
/// partial table returns (discrete) and merges before the probe phase.
pub fn simulate_plan(
    cfg: &EngineConfig,
    plan: &Plan,
    mat: &MaterializedJoin,
) -> Result<ExecutionReport, EngineError> {
    let link = cfg.link();
    let chunk = plan.chunk_size.unwrap_or(cfg.chunk_size).max(1);
    let mut t = 0.0f64;
    let mut reports = Vec::with_capacity(mat.series.len());
    let mut merge_time = 0.0;
    let mut return_transfer = 0.0;
    let mut cpu_busy = 0.0;
    let mut gpu_busy = 0.0;
    let mut stall_total = 0.0;
    let mut transfer_total = 0.0;

    for (idx, se) in mat.series.iter().enumerate() {
        let start = t;
        if se.spec.phase == Phase::PairJoin {
            let coarse = mat.coarse.as_ref().expect("coarse record present");
            let split = coarse.split_pairs.min(coarse.pair_work.len());
            let cost =
                |p: &DeviceProfile, range: std::ops::Range<usize>| {
                    simulate_step(p, coarse.pair_work[range].iter().map(|w| pair_cost(p, w)))
                };
            let w_cpu = cost(&cfg.cpu, 0..split);
            let w_gpu = cost(&cfg.gpu, split..coarse.pair_work.len());
            let mut gpu_start = start;
            let mut dispatch = 0.0;
            if link.enabled && split < coarse.pair_work.len() {
                let items: u64 = coarse.pair_work[split..]
                    .iter()
                    .map(|w| w.build_items + w.probe_items)
                    .sum();
                dispatch = transfer_time(&link, items as f64 * 8.0);
                gpu_start += dispatch;
                transfer_total += dispatch;
                let emitted: u64 = coarse.pair_work[split..].iter().map(|w| w.emitted).sum();
                let ret = transfer_time(&link, emitted as f64 * 8.0);
                return_transfer += ret;
                transfer_total += ret;
            }
            cpu_busy += w_cpu;
            gpu_busy += w_gpu;
            let end = (start + w_cpu).max(gpu_start + w_gpu) + return_transfer;
            reports.push(SeriesReport {
                label: se.spec.label.clone(),
                phase: se.spec.phase,
                cpu: Vec::new(),
                gpu: Vec::new(),
                duration: end - start,
                dispatch_transfer: dispatch,
                handoff_link: 0.0,
            });
            t = end;
            continue;
        }

        if let Some(assignment) = &se.chunk_assignment {
            let (report, dc, dg) = simulate_chunked(cfg, se, assignment, chunk, start);
            cpu_busy += report.cpu.iter().map(|s| s.work).sum::<f64>();
            gpu_busy += report.gpu.iter().map(|s| s.work).sum::<f64>();
            stall_total += report
                .cpu
                .iter()
                .chain(report.gpu.iter())
                .map(|s| s.stall)
                .sum::<f64>();
            transfer_total += report.dispatch_transfer;
            t = start + dc.max(dg);
            reports.push(report);
        } else {
            let env = SeriesEnv {
                cpu: &cfg.cpu,
                gpu: &cfg.gpu,
                link,
                item_bytes: 8.0,
                dispatch_bytes: 8.0,
                charge_dispatch: se.spec.fresh_input,
                handoff_cap_items: cfg.handoff_cap_items(),
            };
            let times = timeline::simulate_series(&se.work, &plan.ratios[idx], &env, start)?;
            cpu_busy += times.cpu.iter().map(|s| s.work).sum::<f64>();
            gpu_busy += times.gpu.iter().map(|s| s.work).sum::<f64>();
            stall_total += times
                .cpu
                .iter()
                .chain(times.gpu.iter())
                .map(|s| s.stall)
                .sum::<f64>();
            transfer_total += times.dispatch + times.handoff_link;
            let mut end = times.end();
            let mut gpu_end = times.gpu_end;

            let is_last_build = se.spec.phase == Phase::Build;
            if is_last_build && plan.table_mode == TableMode::Separate {
                if link.enabled && mat.gpu_build_items > 0 {
                    let ret = transfer_time(&link, mat.gpu_build_items as f64 * 8.0);
                    gpu_end += ret;
                    return_transfer += ret;
                    transfer_total += ret;
                }
                let merge =
                    mat.merge_pairs as f64 * cfg.cpu.merge_unit() / cfg.cpu.slots();
                merge_time += merge;
                end = times.cpu_end.max(gpu_end) + merge;
            }
            if se.spec.phase == Phase::Probe && link.enabled {
                // The wide device returns its share of emitted pairs.
                if let Some(w) = se.work.weights.last().and_then(|w| w.as_ref()) {
                    let k = plan.ratios[idx]
                        .last()
                        .map(|&r| ((r * se.work.x as f64).floor() as usize).min(se.work.x))
                        .unwrap_or(se.work.x);
                    let gpu_pairs: u64 = w[k..].iter().map(|&e| e as u64).sum();
                    if gpu_pairs > 0 {
                        let ret = transfer_time(&link, gpu_pairs as f64 * 8.0);
                        return_transfer += ret;
                        transfer_total += ret;
                        end = end.max(gpu_end + ret);
                    }
                }
            }

            reports.push(SeriesReport {
                label: se.spec.label.clone(),
                phase: se.spec.phase,
                cpu: times.cpu,
                gpu: times.gpu,
                duration: end - start,
                dispatch_transfer: times.dispatch,
                handoff_link: times.handoff_link,
            });
            t = end;
        }
    }

    Ok(ExecutionReport {
        series: reports,
        merge_time,
        return_transfer,
        total: t,
        cpu_busy,
        gpu_busy,
        stall_total,
        transfer_total,
        result_count: mat.result.len() as u64,
        matches: mat.matches,
        grant_ops: mat.grant_ops,
        probe_divergence: mat.probe_divergence,
        schedulable_units: mat.schedulable_units,
    })
}

/// Model prediction of a full plan from measured statistics, mirroring the
/// structure the simulator accounts (dispatch, handoffs, merge, returns).
pub fn predict_plan(cfg: &EngineConfig, plan: &Plan, mat: &MaterializedJoin) -> f64 {
    let mut env = cfg.model_env();
    let link = cfg.link();
    let mut total = 0.0;
    for (idx, se) in mat.series.iter().enumerate() {
        if se.spec.phase == Phase::PairJoin {
            let coarse = mat.coarse.as_ref().expect("coarse record present");
            let r = plan.ratios[idx].first().copied().unwrap_or(1.0);
            let total_cpu: f64 =
                coarse.pair_work.iter().map(|w| pair_cost(&cfg.cpu, w)).sum::<f64>()
                    / cfg.cpu.slots();
            let total_gpu: f64 =
                coarse.pair_work.iter().map(|w| pair_cost(&cfg.gpu, w)).sum::<f64>()
                    / cfg.gpu.slots();
            total += (r * total_cpu).max((1.0 - r) * total_gpu);
            continue;
        }
        if se.chunk_assignment.is_some() {
            // Dynamic chunks approximate an even split of the phase.
            let stats = &mat.stats[idx];
            let (_, t) = search::search_dd_phase(&[stats], 0.05, &env);
            total += t;
            continue;
        }
        env.charge_dispatch = se.spec.fresh_input && link.enabled;
        total += crate::costmodel::predict(&stats_for(mat, idx), &plan.ratios[idx], &env).total;
        if se.spec.phase == Phase::Build && plan.table_mode == TableMode::Separate {
            if link.enabled && mat.gpu_build_items > 0 {
                total += transfer_time(&link, mat.gpu_build_items as f64 * 8.0);
            }
            total += mat.merge_pairs as f64 * cfg.cpu.merge_unit() / cfg.cpu.slots();
        }
        if se.spec.phase == Phase::Probe && link.enabled {
            let r = plan.ratios[idx].last().copied().unwrap_or(1.0);
            let gpu_pairs = (1.0 - r) * mat.result.len() as f64;
            if gpu_pairs > 0.0 {
                total += transfer_time(&link, gpu_pairs * 8.0);
            }
        }
    }
    total
}

fn stats_for(mat: &MaterializedJoin, idx: usize) -> SeriesStats {
    mat.stats[idx].clone()
}

/// Searches (or accepts) a plan, runs the material work, and replays the
/// logical timeline.
pub fn execute(
    cfg: &EngineConfig,
    build: &Relation,
    probe: &Relation,
    plan_override: Option<Plan>,
) -> Result<(Plan, MaterializedJoin, ExecutionReport, f64), EngineError> {
    cfg.validate()?;
    let plan = match plan_override {
        Some(p) => p,
        None => search_plan(cfg, build.len(), probe.len()).0,
    };
    let mat = prepare(cfg, &plan, build, probe)?;
    let report = simulate_plan(cfg, &plan, &mat)?;
    let predicted = predict_plan(cfg, &plan, &mat);
    Ok((plan, mat, report, predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{gen_probe, gen_skewed, gen_uniform};

    fn oracle(build: &Relation, probe: &Relation) -> Vec<(u32, u32)> {
        let mut by_key = std::collections::HashMap::<u32, Vec<u32>>::new();
        for (k, r) in build.pairs() {
            by_key.entry(k).or_default().push(r);
        }
        let mut out = Vec::new();
        for (k, pr) in probe.pairs() {
            if let Some(rs) = by_key.get(&k) {
                for &br in rs {
                    out.push((br, pr));
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn small_cfg(algo: Algo, scheme: Scheme) -> EngineConfig {
        let mut cfg = EngineConfig::new(algo, scheme);
        cfg.pass_bits = 4;
        cfg.passes = 1;
        cfg.delta = 0.25;
        cfg.chunk_size = 512;
        cfg
    }

    #[test]
    fn every_scheme_matches_the_oracle() {
        let build = gen_skewed(3000, 25, 7);
        let probe = gen_probe(&build, 4000, 0.5, 8).unwrap();
        let want = oracle(&build, &probe);
        for algo in [Algo::Shj, Algo::Phj] {
            for scheme in Scheme::ALL {
                if scheme == Scheme::CoarsePipelined && algo == Algo::Shj {
                    continue;
                }
                for table_mode in [TableMode::Shared, TableMode::Separate] {
                    for arch in [ArchMode::Coupled, ArchMode::Discrete] {
                        let mut cfg = small_cfg(algo, scheme);
                        cfg.table_mode = table_mode;
                        cfg.arch = arch;
                        let (_, mat, report, predicted) =
                            execute(&cfg, &build, &probe, None).unwrap();
                        assert_eq!(
                            mat.result.pairs, want,
                            "mismatch for {algo:?}/{scheme:?}/{table_mode:?}/{arch:?}"
                        );
                        assert!(report.total > 0.0);
                        assert!(predicted > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn cpu_only_plan_reports_zero_gpu_time_and_transfers() {
        let build = gen_uniform(2000, (0, 1 << 20), 1);
        let probe = gen_uniform(2000, (0, 1 << 20), 2);
        let mut cfg = small_cfg(Algo::Shj, Scheme::CpuOnly);
        cfg.arch = ArchMode::Discrete;
        let (_, _, report, _) = execute(&cfg, &build, &probe, None).unwrap();
        assert_eq!(report.gpu_busy, 0.0);
        assert_eq!(report.transfer_total, 0.0);
    }

    #[test]
    fn separate_mode_records_merge_time_shared_does_not() {
        let build = gen_uniform(4000, (0, 1 << 20), 3);
        let probe = gen_uniform(4000, (0, 1 << 20), 4);
        let mut cfg = small_cfg(Algo::Shj, Scheme::DataDivide);
        cfg.table_mode = TableMode::Separate;
        let (_, _, sep, _) = execute(&cfg, &build, &probe, None).unwrap();
        assert!(sep.merge_time > 0.0);
        cfg.table_mode = TableMode::Shared;
        let (_, _, sh, _) = execute(&cfg, &build, &probe, None).unwrap();
        assert_eq!(sh.merge_time, 0.0);
    }

    #[test]
    fn discrete_rows_show_transfers_coupled_do_not() {
        let build = gen_uniform(3000, (0, 1 << 20), 5);
        let probe = gen_uniform(3000, (0, 1 << 20), 6);
        let mut cfg = small_cfg(Algo::Shj, Scheme::DataDivide);
        cfg.arch = ArchMode::Discrete;
        let (_, _, disc, _) = execute(&cfg, &build, &probe, None).unwrap();
        assert!(disc.transfer_total > 0.0);
        cfg.arch = ArchMode::Coupled;
        let (_, _, coup, _) = execute(&cfg, &build, &probe, None).unwrap();
        assert_eq!(coup.transfer_total, 0.0);
    }

    #[test]
    fn equal_consecutive_ratios_record_zero_stall() {
        let build = gen_uniform(4000, (0, 1 << 20), 7);
        let probe = gen_uniform(4000, (0, 1 << 20), 8);
        let cfg = small_cfg(Algo::Shj, Scheme::DataDivide);
        let (_, _, report, _) = execute(&cfg, &build, &probe, None).unwrap();
        assert_eq!(report.stall_total, 0.0);
    }

    #[test]
    fn basic_unit_whole_input_chunk_runs_one_device() {
        let build = gen_uniform(1000, (0, 1 << 20), 9);
        let probe = gen_uniform(1000, (0, 1 << 20), 10);
        let mut cfg = small_cfg(Algo::Shj, Scheme::BasicUnit);
        cfg.chunk_size = 10_000;
        let (_, _, report, _) = execute(&cfg, &build, &probe, None).unwrap();
        // The first pull wins everything; the tie-break goes to the narrow
        // device.
        assert_eq!(report.gpu_busy, 0.0);
    }

    #[test]
    fn coarse_scheme_exposes_partition_pair_units() {
        let build = gen_uniform(4096, (0, 1 << 20), 11);
        let probe = gen_uniform(4096, (0, 1 << 20), 12);
        let cfg = small_cfg(Algo::Phj, Scheme::CoarsePipelined);
        let (_, _, report, _) = execute(&cfg, &build, &probe, None).unwrap();
        assert_eq!(report.schedulable_units, Some(16));
    }

    #[test]
    fn plan_text_round_trip() {
        let cfg = small_cfg(Algo::Shj, Scheme::Pipelined);
        let (plan, _) = search_plan(&cfg, 1000, 1000);
        let text = plan.to_text();
        let back = Plan::parse_text(&text).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn grouping_leaves_results_unchanged() {
        let build = gen_skewed(4096, 25, 13);
        let probe = gen_probe(&build, 4096, 1.0, 14).unwrap();
        let mut plain_cfg = small_cfg(Algo::Shj, Scheme::Pipelined);
        plain_cfg.groups = 1;
        let mut grouped_cfg = plain_cfg.clone();
        grouped_cfg.groups = 16;
        let (_, m1, r1, _) = execute(&plain_cfg, &build, &probe, None).unwrap();
        let (_, m2, r2, _) = execute(&grouped_cfg, &build, &probe, None).unwrap();
        assert_eq!(m1.result.pairs, m2.result.pairs);
        assert!(r2.probe_divergence <= r1.probe_divergence);
    }
}
