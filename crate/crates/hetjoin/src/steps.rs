//! Fine-grained per-tuple step kernels, radix partitioning passes, join
//! materialization, and workload grouping.
//!
//! A join runs as ordered step series separated by barriers: partition passes
//! (`n1..n3`, once per pass per relation), a build series (`b1..b4`), and a
//! probe series (`p1..p4`). Material execution mutates real structures and
//! records a per-item workload weight for the steps whose cost depends on
//! the data (key-list traversals, rid emission); the weights are
//! order-independent functions of the final structures, so logical times are
//! deterministic no matter how threads interleave.

use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::arena::{Arena, ArenaError, GroupAlloc};
use crate::device::DeviceProfile;
use crate::hashtable::{default_bucket_count, murmur2, HashTable, TableLayout, NONE};
use crate::relation::Relation;

/// Identifies one fine-grained step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StepId {
    BuildHash,
    BuildHeader,
    BuildKeySearch,
    BuildRidInsert,
    ProbeHash,
    ProbeHeader,
    ProbeKeySearch,
    ProbeEmit,
    PartHash,
    PartHeader,
    PartInsert,
}

impl StepId {
    pub const COUNT: usize = 11;
    pub const BUILD: [StepId; 4] =
        [StepId::BuildHash, StepId::BuildHeader, StepId::BuildKeySearch, StepId::BuildRidInsert];
    pub const PROBE: [StepId; 4] =
        [StepId::ProbeHash, StepId::ProbeHeader, StepId::ProbeKeySearch, StepId::ProbeEmit];
    pub const PARTITION: [StepId; 3] = [StepId::PartHash, StepId::PartHeader, StepId::PartInsert];
    pub const ALL: [StepId; Self::COUNT] = [
        StepId::BuildHash,
        StepId::BuildHeader,
        StepId::BuildKeySearch,
        StepId::BuildRidInsert,
        StepId::ProbeHash,
        StepId::ProbeHeader,
        StepId::ProbeKeySearch,
        StepId::ProbeEmit,
        StepId::PartHash,
        StepId::PartHeader,
        StepId::PartInsert,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// Short code used in reports and profile files.
    pub fn code(self) -> &'static str {
        match self {
            StepId::BuildHash => "b1",
            StepId::BuildHeader => "b2",
            StepId::BuildKeySearch => "b3",
            StepId::BuildRidInsert => "b4",
            StepId::ProbeHash => "p1",
            StepId::ProbeHeader => "p2",
            StepId::ProbeKeySearch => "p3",
            StepId::ProbeEmit => "p4",
            StepId::PartHash => "n1",
            StepId::PartHeader => "n2",
            StepId::PartInsert => "n3",
        }
    }

    pub fn from_code(code: &str) -> Option<StepId> {
        Self::ALL.iter().copied().find(|s| s.code() == code)
    }
}

/// Item stream feeding a join phase. The partition of an item is a pure
/// function of its key, so permuted streams need no extra bookkeeping.
#[derive(Clone, Debug)]
pub struct JoinStream {
    pub items: Vec<(u32, u32)>,
    pub radix_bits: u32,
    pub hash_seed: u32,
}

impl JoinStream {
    pub fn from_relation(rel: &Relation) -> Self {
        JoinStream { items: rel.pairs().collect(), radix_bits: 0, hash_seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    #[inline]
    pub fn part_of(&self, key: u32) -> u32 {
        if self.radix_bits == 0 {
            0
        } else {
            murmur2(key, self.hash_seed) & ((1u32 << self.radix_bits) - 1)
        }
    }

    /// Applies a permutation: output item `i` is input item `order[i]`.
    pub fn permuted(&self, order: &[u32]) -> JoinStream {
        assert_eq!(order.len(), self.items.len());
        JoinStream {
            items: order.iter().map(|&i| self.items[i as usize]).collect(),
            radix_bits: self.radix_bits,
            hash_seed: self.hash_seed,
        }
    }
}

/// Material record of one executed step series: item count, the workload
/// weight vector for data-dependent steps, and the aggregate statistics the
/// cost model consumes.
#[derive(Clone, Debug)]
pub struct SeriesWork {
    pub steps: Vec<StepId>,
    /// Items entering the series (every step sees the same stream here).
    pub x: usize,
    /// Per-step, per-item workload multiplier; `None` means unit weight.
    pub weights: Vec<Option<Arc<Vec<u32>>>>,
    /// Model-facing input count per step (emission counts matched items).
    pub model_x: Vec<f64>,
    /// Model-facing average weight per step.
    pub avg_weight: Vec<f64>,
}

impl SeriesWork {
    fn uniform(steps: Vec<StepId>, x: usize) -> Self {
        let n = steps.len();
        SeriesWork {
            steps,
            x,
            weights: vec![None; n],
            model_x: vec![x as f64; n],
            avg_weight: vec![1.0; n],
        }
    }

    /// Weight of item `i` at step position `pos`.
    #[inline]
    pub fn weight(&self, pos: usize, i: usize) -> u32 {
        match &self.weights[pos] {
            Some(w) => w[i],
            None => 1,
        }
    }
}

/// Pairs of matching record ids, build side first.
#[derive(Clone, Debug, Default)]
pub struct JoinResult {
    pub pairs: Vec<(u32, u32)>,
}

impl JoinResult {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sorted(mut self) -> Vec<(u32, u32)> {
        self.pairs.sort_unstable();
        self.pairs
    }
}

/// Emission sink writing rid pairs into chained arena chunks.
struct EmitChain<'a> {
    ga: GroupAlloc<'a>,
    chunk_bytes: usize,
    head: u32,
    cur: u32,
    fill: u32,
    cap: u32,
}

impl<'a> EmitChain<'a> {
    fn new(arena: &'a Arena, chunk_bytes: usize) -> Self {
        let cap = ((chunk_bytes - 8) / 8) as u32;
        assert!(cap > 0, "emission chunk too small");
        EmitChain { ga: GroupAlloc::new(arena, chunk_bytes), chunk_bytes, head: NONE, cur: NONE, fill: 0, cap }
    }

    fn push(&mut self, a: u32, b: u32) -> Result<(), ArenaError> {
        if self.cur == NONE || self.fill == self.cap {
            let off = self.ga.alloc(self.chunk_bytes)?;
            let arena = self.ga.arena();
            arena.store_u32(off, self.head);
            arena.store_u32(off + 4, 0);
            self.head = off as u32;
            self.cur = off as u32;
            self.fill = 0;
        }
        let arena = self.ga.arena();
        let base = self.cur as usize + 8 + self.fill as usize * 8;
        arena.store_u32(base, a);
        arena.store_u32(base + 4, b);
        self.fill += 1;
        arena.store_u32(self.cur as usize + 4, self.fill);
        Ok(())
    }

    fn collect(self, out: &mut Vec<(u32, u32)>) {
        let arena = self.ga.arena();
        let mut chunk = self.head;
        while chunk != NONE {
            let fill = arena.load_u32(chunk as usize + 4);
            for i in 0..fill {
                let base = chunk as usize + 8 + i as usize * 8;
                out.push((arena.load_u32(base), arena.load_u32(base + 4)));
            }
            chunk = arena.load_u32(chunk as usize);
        }
    }
}

struct PartHeaderSlot {
    count: AtomicU32,
    head: AtomicU32,
    latch: AtomicU32,
}

impl PartHeaderSlot {
    fn new() -> Self {
        PartHeaderSlot {
            count: AtomicU32::new(0),
            head: AtomicU32::new(NONE),
            latch: AtomicU32::new(0),
        }
    }

    fn lock(&self) {
        while self.latch.compare_exchange_weak(0, 1, Ordering::Acquire, Ordering::Relaxed).is_err()
        {
            std::hint::spin_loop();
        }
    }

    fn unlock(&self) {
        self.latch.store(0, Ordering::Release);
    }
}

/// Bucketed partition storage: one header per partition pointing at a chain
/// of fixed-size pair chunks in the arena.
pub struct PartitionSet {
    headers: Box<[PartHeaderSlot]>,
    arena: Arc<Arena>,
    chunk_bytes: usize,
    pub radix_bits: u32,
    pub hash_seed: u32,
}

impl PartitionSet {
    pub fn new(arena: Arc<Arena>, partitions: usize, chunk_bytes: usize, radix_bits: u32, hash_seed: u32) -> Self {
        let mut v = Vec::with_capacity(partitions);
        v.resize_with(partitions, PartHeaderSlot::new);
        PartitionSet { headers: v.into_boxed_slice(), arena, chunk_bytes, radix_bits, hash_seed }
    }

    pub fn partitions(&self) -> usize {
        self.headers.len()
    }

    pub fn part_count(&self, part: u32) -> u32 {
        self.headers[part as usize].count.load(Ordering::Relaxed)
    }

    fn chunk_cap(&self) -> u32 {
        ((self.chunk_bytes - 8) / 8) as u32
    }

    pub fn append(&self, ga: &mut GroupAlloc, part: u32, key: u32, rid: u32) -> Result<(), ArenaError> {
        let hdr = &self.headers[part as usize];
        hdr.lock();
        let res = (|| {
            let mut head = hdr.head.load(Ordering::Relaxed);
            let need_chunk =
                head == NONE || self.arena.load_u32(head as usize + 4) == self.chunk_cap();
            if need_chunk {
                let off = ga.alloc(self.chunk_bytes)?;
                self.arena.store_u32(off, head);
                self.arena.store_u32(off + 4, 0);
                hdr.head.store(off as u32, Ordering::Relaxed);
                head = off as u32;
            }
            let fill = self.arena.load_u32(head as usize + 4);
            let base = head as usize + 8 + fill as usize * 8;
            self.arena.store_u32(base, key);
            self.arena.store_u32(base + 4, rid);
            self.arena.store_u32(head as usize + 4, fill + 1);
            hdr.count.fetch_add(1, Ordering::Relaxed);
            Ok(())
        })();
        hdr.unlock();
        res
    }

    /// Pairs stored in one partition.
    pub fn collect_partition(&self, part: u32, out: &mut Vec<(u32, u32)>) {
        let mut chunk = self.headers[part as usize].head.load(Ordering::Relaxed);
        while chunk != NONE {
            let fill = self.arena.load_u32(chunk as usize + 4);
            for i in 0..fill {
                let base = chunk as usize + 8 + i as usize * 8;
                out.push((self.arena.load_u32(base), self.arena.load_u32(base + 4)));
            }
            chunk = self.arena.load_u32(chunk as usize);
        }
    }

    /// Concatenates all partitions in index order into a join stream. Items
    /// within a partition are ordered by record id, which makes the stream a
    /// pure function of the input no matter how appends interleaved.
    pub fn to_stream(&self) -> JoinStream {
        let total: usize = (0..self.partitions() as u32).map(|p| self.part_count(p) as usize).sum();
        let mut items = Vec::with_capacity(total);
        let mut scratch = Vec::new();
        for p in 0..self.partitions() as u32 {
            scratch.clear();
            self.collect_partition(p, &mut scratch);
            scratch.sort_unstable_by_key(|&(_, rid)| rid);
            items.extend_from_slice(&scratch);
        }
        JoinStream { items, radix_bits: self.radix_bits, hash_seed: self.hash_seed }
    }

    /// Partition boundaries of [`Self::to_stream`]'s item order.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.partitions() + 1);
        let mut acc = 0usize;
        for p in 0..self.partitions() as u32 {
            starts.push(acc);
            acc += self.part_count(p) as usize;
        }
        starts.push(acc);
        starts
    }
}

/// Assignment of stream items to the two device worker threads.
#[derive(Clone, Copy, Debug)]
pub enum Ownership<'a> {
    /// The first `k` items belong to device 0, the rest to device 1.
    Prefix(usize),
    /// Fixed-size chunks assigned per entry; `true` means device 0.
    Chunks { assignment: &'a [bool], chunk_size: usize },
}

impl Ownership<'_> {
    pub fn owner(&self, i: usize) -> usize {
        match self {
            Ownership::Prefix(k) => usize::from(i >= *k),
            Ownership::Chunks { assignment, chunk_size } => {
                usize::from(!assignment[i / chunk_size])
            }
        }
    }

    /// Item indices owned by `device`, ascending.
    pub fn items(&self, device: usize, total: usize) -> Vec<Range<usize>> {
        match self {
            Ownership::Prefix(k) => {
                let k = (*k).min(total);
                if device == 0 {
                    vec![0..k]
                } else {
                    vec![k..total]
                }
            }
            Ownership::Chunks { assignment, chunk_size } => {
                let mut out = Vec::new();
                for (c, &to_cpu) in assignment.iter().enumerate() {
                    if (to_cpu && device == 0) || (!to_cpu && device == 1) {
                        let lo = c * chunk_size;
                        if lo >= total {
                            break;
                        }
                        out.push(lo..((c + 1) * chunk_size).min(total));
                    }
                }
                out
            }
        }
    }

    fn is_single_device(&self, total: usize) -> Option<usize> {
        for d in 0..2 {
            if self.items(1 - d, total).iter().all(|r| r.is_empty()) {
                return Some(d);
            }
        }
        None
    }
}

/// Runs `work(device)` on two scoped threads, or inline when one device owns
/// everything.
fn run_two_devices<F>(owner: &Ownership, total: usize, work: F) -> Result<(), ArenaError>
where
    F: Fn(usize) -> Result<(), ArenaError> + Sync,
{
    if let Some(d) = owner.is_single_device(total) {
        return work(d);
    }
    let mut results = [Ok(()), Ok(())];
    let (left, right) = results.split_at_mut(1);
    std::thread::scope(|s| {
        let w = &work;
        s.spawn(|| left[0] = w(0));
        s.spawn(|| right[0] = w(1));
    });
    let [a, b] = results;
    a.and(b)
}

/// One radix partitioning pass: scatters `input` into `out` by hash bits
/// `[bit_lo, bit_lo + pass_bits)`, folded on top of each item's current
/// partition.
pub fn run_partition_pass(
    input: &JoinStream,
    out: &PartitionSet,
    pass_bits: u32,
    bit_lo: u32,
    owner: &Ownership,
    block_size: usize,
) -> Result<SeriesWork, ArenaError> {
    let mask = (1u32 << pass_bits) - 1;
    run_two_devices(owner, input.len(), |device| {
        let mut ga = GroupAlloc::new(&out.arena, block_size.max(out.chunk_bytes));
        for range in owner.items(device, input.len()) {
            for i in range {
                let (key, rid) = input.items[i];
                let prior = input.part_of(key);
                let bits = (murmur2(key, out.hash_seed) >> bit_lo) & mask;
                let part = prior | (bits << bit_lo);
                out.append(&mut ga, part, key, rid)?;
            }
        }
        Ok(())
    })?;
    Ok(SeriesWork::uniform(StepId::PARTITION.to_vec(), input.len()))
}

/// Multi-pass radix partitioning of a relation. `passes == 0` yields the
/// single-partition identity stream.
pub fn radix_partition(
    rel: &Relation,
    pass_bits: u32,
    passes: u32,
    arena: Arc<Arena>,
    chunk_bytes: usize,
    hash_seed: u32,
    owners: Option<&[Ownership]>,
) -> Result<(JoinStream, Vec<SeriesWork>), ArenaError> {
    assert!(pass_bits * passes <= 32, "radix bits exceed hash width");
    let mut stream = JoinStream {
        items: rel.pairs().collect(),
        radix_bits: 0,
        hash_seed,
    };
    let mut work = Vec::new();
    for pass in 0..passes {
        let bit_lo = pass * pass_bits;
        let parts = 1usize << (bit_lo + pass_bits);
        let out = PartitionSet::new(arena.clone(), parts, chunk_bytes, bit_lo + pass_bits, hash_seed);
        let owner = owners.map(|o| o[pass as usize]).unwrap_or(Ownership::Prefix(stream.len()));
        work.push(run_partition_pass(&stream, &out, pass_bits, bit_lo, &owner, chunk_bytes)?);
        stream = out.to_stream();
    }
    Ok((stream, work))
}

/// Builds hash tables from `stream`: each device worker inserts its owned
/// items into its table (pass the same table twice for shared mode).
/// Returns the series record with key-search weights taken from the final
/// state of `tables[0]`, so in separate mode merge first and derive the
/// record with [`build_series_work`].
pub fn run_build(
    tables: [&HashTable; 2],
    stream: &JoinStream,
    owner: &Ownership,
    block_size: usize,
) -> Result<(), ArenaError> {
    run_two_devices(owner, stream.len(), |device| {
        let table = tables[device];
        let mut ga = GroupAlloc::new(table.arena(), block_size);
        for range in owner.items(device, stream.len()) {
            for i in range {
                let (key, rid) = stream.items[i];
                table.insert(&mut ga, stream.part_of(key), key, rid)?;
            }
        }
        Ok(())
    })
}

/// Series record for an already-built table (used when the table was
/// constructed elsewhere, e.g. per-device in separate mode).
pub fn build_series_work(table: &HashTable, stream: &JoinStream) -> SeriesWork {
    let mut w = SeriesWork::uniform(StepId::BUILD.to_vec(), stream.len());
    let mut search = Vec::with_capacity(stream.len());
    for &(key, _) in &stream.items {
        let bucket = table.bucket_of(stream.part_of(key), key);
        search.push(table.key_list_len(bucket).max(1));
    }
    let pos = 2; // b3
    w.avg_weight[pos] = mean_u32(&search);
    w.weights[pos] = Some(Arc::new(search));
    w
}

/// Outcome of the probe series.
pub struct ProbeOutcome {
    pub work: SeriesWork,
    pub result: JoinResult,
    pub matches: usize,
}

/// Probes `stream` against `table`, emitting `(build_rid, probe_rid)` pairs
/// through arena chunks. Key-search weight is the full key-list length of
/// the probed bucket; emission weight is the rid-list length on a match.
pub fn run_probe(
    table: &HashTable,
    stream: &JoinStream,
    owner: &Ownership,
    block_size: usize,
) -> Result<ProbeOutcome, ArenaError> {
    let n = stream.len();
    let searches: Vec<AtomicU32> = (0..n).map(|_| AtomicU32::new(0)).collect();
    let emits: Vec<AtomicU32> = (0..n).map(|_| AtomicU32::new(0)).collect();

    let chunk_bytes = block_size.max(64);
    let device_pairs: [std::sync::Mutex<Vec<(u32, u32)>>; 2] = Default::default();
    run_two_devices(owner, n, |device| {
        let mut chain = EmitChain::new(table.arena(), chunk_bytes);
        for range in owner.items(device, n) {
            for i in range {
                let (key, rid) = stream.items[i];
                let bucket = table.bucket_of(stream.part_of(key), key);
                searches[i].store(table.key_list_len(bucket), Ordering::Relaxed);
                if let Some(key_off) = table.find_key(bucket, key) {
                    let mut emitted = 0u32;
                    for build_rid in table.rids_of(key_off) {
                        chain.push(build_rid, rid)?;
                        emitted += 1;
                    }
                    emits[i].store(emitted, Ordering::Relaxed);
                }
            }
        }
        chain.collect(&mut device_pairs[device].lock().unwrap());
        Ok(())
    })?;

    let mut pairs = device_pairs[0].lock().unwrap().clone();
    pairs.extend(device_pairs[1].lock().unwrap().iter().copied());

    let searches: Vec<u32> = searches.into_iter().map(|a| a.into_inner()).collect();
    let emits: Vec<u32> = emits.into_iter().map(|a| a.into_inner()).collect();
    let matches = emits.iter().filter(|&&e| e > 0).count();

    let mut work = SeriesWork::uniform(StepId::PROBE.to_vec(), n);
    work.avg_weight[2] = mean_u32(&searches);
    work.weights[2] = Some(Arc::new(searches));
    // Emission is modeled over matched items only.
    work.model_x[3] = matches as f64;
    work.avg_weight[3] = if matches == 0 {
        0.0
    } else {
        emits.iter().map(|&e| e as f64).sum::<f64>() / matches as f64
    };
    work.weights[3] = Some(Arc::new(emits));

    Ok(ProbeOutcome { work, result: JoinResult { pairs }, matches })
}

fn mean_u32(v: &[u32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

/// Groups items into `g_groups` rank bands of similar workload. Returns the
/// permutation as the list of original indices in their new order; order is
/// stable within a band, and `g_groups == 1` is the identity.
pub fn group_by_workload(measures: &[u32], g_groups: usize) -> Vec<u32> {
    assert!(g_groups >= 1);
    let n = measures.len();
    if g_groups == 1 || n <= 1 {
        return (0..n as u32).collect();
    }
    let mut by_measure: Vec<u32> = (0..n as u32).collect();
    by_measure.sort_by_key(|&i| (measures[i as usize], i));
    let band_size = n.div_ceil(g_groups);
    let mut band = vec![0u32; n];
    for (rank, &idx) in by_measure.iter().enumerate() {
        band[idx as usize] = (rank / band_size) as u32;
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&i| (band[i as usize], i));
    order
}

/// Simple single-device hash join used as a building block and by tests.
pub fn shj_join(build: &Relation, probe: &Relation, hash_seed: u32) -> JoinResult {
    let arena = Arc::new(Arena::new(join_arena_bytes(build.len(), probe.len())).unwrap());
    let layout = TableLayout::simple(default_bucket_count(build.len()), hash_seed);
    let table = HashTable::new(arena, layout);
    let bs = JoinStream::from_relation(build);
    run_build([&table, &table], &bs, &Ownership::Prefix(bs.len()), crate::arena::DEFAULT_BLOCK_SIZE)
        .unwrap();
    let ps = JoinStream::from_relation(probe);
    run_probe(&table, &ps, &Ownership::Prefix(ps.len()), crate::arena::DEFAULT_BLOCK_SIZE)
        .unwrap()
        .result
}

/// Partitioned hash join on a single device: radix partition both inputs,
/// then build and probe partition-aligned bucket regions.
pub fn phj_join(
    build: &Relation,
    probe: &Relation,
    pass_bits: u32,
    passes: u32,
    hash_seed: u32,
) -> Result<JoinResult, ArenaError> {
    let arena = Arc::new(Arena::new(
        join_arena_bytes(build.len(), probe.len()) + partition_arena_bytes(build.len() + probe.len(), passes),
    )?);
    let (bs, _) = radix_partition(build, pass_bits, passes, arena.clone(), crate::arena::DEFAULT_BLOCK_SIZE, hash_seed, None)?;
    let (ps, _) = radix_partition(probe, pass_bits, passes, arena.clone(), crate::arena::DEFAULT_BLOCK_SIZE, hash_seed, None)?;
    let parts = 1u32 << (pass_bits * passes);
    let per_part = default_bucket_count(build.len() / parts as usize);
    let layout = TableLayout::partitioned(per_part, parts, pass_bits * passes, hash_seed);
    let table = HashTable::new(arena, layout);
    run_build([&table, &table], &bs, &Ownership::Prefix(bs.len()), crate::arena::DEFAULT_BLOCK_SIZE)?;
    Ok(run_probe(&table, &ps, &Ownership::Prefix(ps.len()), crate::arena::DEFAULT_BLOCK_SIZE)?.result)
}

/// Arena bytes for one build table plus probe emission.
pub fn join_arena_bytes(build: usize, probe: usize) -> usize {
    let nodes = build * (crate::hashtable::KEY_NODE_BYTES + crate::hashtable::RID_NODE_BYTES);
    let emit = probe * 12;
    (nodes + emit) * 3 / 2 + (64 << 10)
}

/// Arena bytes for multi-pass partition chunks of `n` tuples.
pub fn partition_arena_bytes(n: usize, passes: u32) -> usize {
    (n * 10 + (4 << 10)) * passes.max(1) as usize * 3 / 2 + (64 << 10)
}

/// Per-pair totals for the coarse step definition, where one schedulable
/// item is a whole simple hash join on a partition pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct PairWork {
    pub build_items: u64,
    pub probe_items: u64,
    pub build_search: u64,
    pub probe_search: u64,
    pub emitted: u64,
}

/// Runs the coarse-step join: each partition pair is joined with its own
/// private hash table. The first `split_pairs` pairs belong to one worker
/// thread. Returns the join result and per-pair workload totals.
pub fn run_coarse_pairs(
    build: &JoinStream,
    build_bounds: &[usize],
    probe: &JoinStream,
    probe_bounds: &[usize],
    split_pairs: usize,
    arena: &Arc<Arena>,
    block_size: usize,
) -> Result<(JoinResult, Vec<PairWork>), ArenaError> {
    let pairs_n = build_bounds.len() - 1;
    assert_eq!(probe_bounds.len() - 1, pairs_n);
    let works: Vec<std::sync::Mutex<PairWork>> =
        (0..pairs_n).map(|_| std::sync::Mutex::new(PairWork::default())).collect();

    let run_pair_range = |range: Range<usize>| -> Result<Vec<(u32, u32)>, ArenaError> {
        let mut out = Vec::new();
        for p in range {
            let b_slice = &build.items[build_bounds[p]..build_bounds[p + 1]];
            let p_slice = &probe.items[probe_bounds[p]..probe_bounds[p + 1]];
            let layout = TableLayout::simple(default_bucket_count(b_slice.len()), build.hash_seed);
            let table = HashTable::new(arena.clone(), layout);
            let mut ga = GroupAlloc::new(arena, block_size);
            let mut w = PairWork {
                build_items: b_slice.len() as u64,
                probe_items: p_slice.len() as u64,
                ..PairWork::default()
            };
            for &(key, rid) in b_slice {
                table.insert(&mut ga, 0, key, rid)?;
            }
            for &(key, _) in b_slice {
                w.build_search += table.key_list_len(table.bucket_of(0, key)).max(1) as u64;
            }
            for &(key, rid) in p_slice {
                let bucket = table.bucket_of(0, key);
                w.probe_search += table.key_list_len(bucket) as u64;
                if let Some(off) = table.find_key(bucket, key) {
                    for build_rid in table.rids_of(off) {
                        out.push((build_rid, rid));
                        w.emitted += 1;
                    }
                }
            }
            *works[p].lock().unwrap() = w;
        }
        Ok(out)
    };

    let split = split_pairs.min(pairs_n);
    let pairs = if split == 0 || split == pairs_n {
        run_pair_range(0..pairs_n)?
    } else {
        let mut outs: [Result<Vec<(u32, u32)>, ArenaError>; 2] = [Ok(Vec::new()), Ok(Vec::new())];
        let (lo, hi) = outs.split_at_mut(1);
        std::thread::scope(|s| {
            let f = &run_pair_range;
            s.spawn(|| lo[0] = f(0..split));
            s.spawn(|| hi[0] = f(split..pairs_n));
        });
        let [a, b] = outs;
        let mut v = a?;
        v.extend(b?);
        v
    };

    let works = works.into_iter().map(|m| m.into_inner().unwrap()).collect();
    Ok((JoinResult { pairs }, works))
}

/// Output of a single step run through the step-at-a-time pipeline.
#[derive(Debug)]
pub enum StepOutput {
    Buckets(Vec<u32>),
    KeyOffsets(Vec<u32>),
    Pairs(Vec<(u32, u32)>),
    Unit,
}

/// Step-at-a-time execution context: runs one step over an item range,
/// materializing the handoff buffers between steps explicitly. Composing
/// steps this way must produce the same structures as the fused kernels.
pub struct StepPipeline<'a> {
    pub table: &'a HashTable,
    pub stream: &'a JoinStream,
    pub parts: Option<&'a PartitionSet>,
    pub pass_bits: u32,
    pub bit_lo: u32,
    buckets: Vec<u32>,
    key_offsets: Vec<u32>,
    part_targets: Vec<u32>,
}

impl<'a> StepPipeline<'a> {
    pub fn new(table: &'a HashTable, stream: &'a JoinStream) -> Self {
        let n = stream.len();
        StepPipeline {
            table,
            stream,
            parts: None,
            pass_bits: 0,
            bit_lo: 0,
            buckets: vec![0; n],
            key_offsets: vec![NONE; n],
            part_targets: vec![0; n],
        }
    }

    pub fn with_partitions(mut self, parts: &'a PartitionSet, pass_bits: u32, bit_lo: u32) -> Self {
        self.parts = Some(parts);
        self.pass_bits = pass_bits;
        self.bit_lo = bit_lo;
        self
    }

    /// Runs `step` over `range`, reading earlier steps' buffers and filling
    /// its own. Returns the step's output view and the accrued logical time
    /// on `profile`.
    pub fn run_step(
        &mut self,
        step: StepId,
        range: Range<usize>,
        ga: &mut GroupAlloc,
        profile: &DeviceProfile,
    ) -> Result<(StepOutput, f64), ArenaError> {
        let mut weights: Vec<u32> = Vec::with_capacity(range.len());
        let out = match step {
            StepId::BuildHash | StepId::ProbeHash => {
                for i in range.clone() {
                    let (key, _) = self.stream.items[i];
                    self.buckets[i] = self.table.bucket_of(self.stream.part_of(key), key);
                    weights.push(1);
                }
                StepOutput::Buckets(self.buckets[range].to_vec())
            }
            StepId::BuildHeader | StepId::ProbeHeader => {
                for i in range {
                    std::hint::black_box(self.table.bucket_tuple_count(self.buckets[i]));
                    weights.push(1);
                }
                StepOutput::Unit
            }
            StepId::BuildKeySearch => {
                for i in range.clone() {
                    let (key, _) = self.stream.items[i];
                    let off = self.table.find_or_create_key(ga, self.buckets[i], key)?;
                    self.key_offsets[i] = off;
                    weights.push(self.table.key_list_len(self.buckets[i]).max(1));
                }
                StepOutput::KeyOffsets(self.key_offsets[range].to_vec())
            }
            StepId::BuildRidInsert => {
                for i in range {
                    let (_, rid) = self.stream.items[i];
                    self.table.append_rid(ga, self.buckets[i], self.key_offsets[i], rid)?;
                    weights.push(1);
                }
                StepOutput::Unit
            }
            StepId::ProbeKeySearch => {
                for i in range.clone() {
                    let (key, _) = self.stream.items[i];
                    weights.push(self.table.key_list_len(self.buckets[i]));
                    self.key_offsets[i] = self.table.find_key(self.buckets[i], key).unwrap_or(NONE);
                }
                StepOutput::KeyOffsets(self.key_offsets[range].to_vec())
            }
            StepId::ProbeEmit => {
                let mut pairs = Vec::new();
                for i in range {
                    let (_, rid) = self.stream.items[i];
                    if self.key_offsets[i] != NONE {
                        let mut emitted = 0u32;
                        for build_rid in self.table.rids_of(self.key_offsets[i]) {
                            pairs.push((build_rid, rid));
                            emitted += 1;
                        }
                        weights.push(emitted);
                    } else {
                        weights.push(0);
                    }
                }
                StepOutput::Pairs(pairs)
            }
            StepId::PartHash => {
                let mask = (1u32 << self.pass_bits) - 1;
                for i in range.clone() {
                    let (key, _) = self.stream.items[i];
                    let prior = self.stream.part_of(key);
                    let bits = (murmur2(key, self.stream.hash_seed) >> self.bit_lo) & mask;
                    self.part_targets[i] = prior | (bits << self.bit_lo);
                    weights.push(1);
                }
                StepOutput::Buckets(self.part_targets[range].to_vec())
            }
            StepId::PartHeader => {
                let parts = self.parts.expect("partition steps need a partition set");
                for i in range {
                    std::hint::black_box(parts.part_count(self.part_targets[i]));
                    weights.push(1);
                }
                StepOutput::Unit
            }
            StepId::PartInsert => {
                let parts = self.parts.expect("partition steps need a partition set");
                for i in range {
                    let (key, rid) = self.stream.items[i];
                    parts.append(ga, self.part_targets[i], key, rid)?;
                    weights.push(1);
                }
                StepOutput::Unit
            }
        };
        let cost = crate::device::simulate_step(
            profile,
            weights.iter().map(|&w| profile.item_cost(step, w)),
        );
        Ok((out, cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{gen_probe, gen_skewed, gen_uniform};

    fn nested_loop(build: &Relation, probe: &Relation) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (bk, br) in build.pairs() {
            for (pk, pr) in probe.pairs() {
                if bk == pk {
                    out.push((br, pr));
                }
            }
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn probe_emits_all_matching_rids() {
        let build = Relation::from_columns(vec![1, 2, 3], vec![7, 7, 7]);
        let probe = Relation::from_columns(vec![9], vec![7]);
        let got = shj_join(&build, &probe, 0).sorted();
        assert_eq!(got, vec![(1, 9), (2, 9), (3, 9)]);
    }

    #[test]
    fn bucket_indices_stay_in_range() {
        let rel = gen_uniform(8, (0, 1 << 20), 3);
        let arena = Arc::new(Arena::new(1 << 16).unwrap());
        let table = HashTable::new(arena, TableLayout::simple(4, 0));
        let stream = JoinStream::from_relation(&rel);
        let mut pipe = StepPipeline::new(&table, &stream);
        let mut ga = GroupAlloc::new(table.arena(), 1024);
        let profile = crate::device::canned_profiles().0;
        let (out, _) = pipe.run_step(StepId::BuildHash, 0..8, &mut ga, &profile).unwrap();
        match out {
            StepOutput::Buckets(b) => {
                assert_eq!(b.len(), 8);
                assert!(b.iter().all(|&x| x < 4));
            }
            _ => panic!("expected bucket indices"),
        }
    }

    #[test]
    fn shj_matches_nested_loop() {
        let build = gen_uniform(1024, (0, 1 << 14), 1);
        let probe = gen_uniform(1024, (0, 1 << 14), 2);
        assert_eq!(shj_join(&build, &probe, 0).sorted(), nested_loop(&build, &probe));
    }

    #[test]
    fn empty_probe_side_yields_empty_result() {
        let build = gen_uniform(128, (0, 1 << 16), 1);
        let probe = Relation::empty();
        assert!(shj_join(&build, &probe, 0).is_empty());
        assert!(shj_join(&probe, &build, 0).is_empty());
    }

    #[test]
    fn phj_matches_shj_on_skewed_input() {
        let build = gen_skewed(4096, 25, 5);
        let probe = gen_probe(&build, 4096, 0.5, 6).unwrap();
        let phj = phj_join(&build, &probe, 4, 1, 0).unwrap().sorted();
        let shj = shj_join(&build, &probe, 0).sorted();
        assert_eq!(phj, shj);
    }

    #[test]
    fn zero_passes_is_identity_partitioning() {
        let rel = gen_uniform(512, (0, 1 << 16), 7);
        let arena = Arc::new(Arena::new(1 << 20).unwrap());
        let (stream, work) = radix_partition(&rel, 4, 0, arena, 2048, 0, None).unwrap();
        assert!(work.is_empty());
        assert_eq!(stream.items.len(), 512);
        let orig: Vec<(u32, u32)> = rel.pairs().collect();
        assert_eq!(stream.items, orig);
    }

    #[test]
    fn partition_conservation_and_membership() {
        let rel = gen_uniform(10_000, (0, u32::MAX), 11);
        let arena = Arc::new(Arena::new(8 << 20).unwrap());
        let (stream, work) = radix_partition(&rel, 4, 2, arena, 2048, 0, None).unwrap();
        assert_eq!(work.len(), 2);
        assert_eq!(stream.items.len(), rel.len());
        // Every tuple's partition equals the low bits of its hash.
        for &(key, _) in &stream.items {
            let expect = murmur2(key, 0) & 0xff;
            assert_eq!(stream.part_of(key), expect);
        }
        // Stream is partition-major.
        let parts: Vec<u32> = stream.items.iter().map(|&(k, _)| stream.part_of(k)).collect();
        assert!(parts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn two_passes_equal_one_wide_pass() {
        let rel = gen_uniform(4096, (0, u32::MAX), 13);
        let a1 = Arc::new(Arena::new(8 << 20).unwrap());
        let a2 = Arc::new(Arena::new(8 << 20).unwrap());
        let (two, _) = radix_partition(&rel, 4, 2, a1, 2048, 0, None).unwrap();
        let (one, _) = radix_partition(&rel, 8, 1, a2, 2048, 0, None).unwrap();
        // Same membership per tuple.
        let mut t: Vec<(u32, u32, u32)> =
            two.items.iter().map(|&(k, r)| (two.part_of(k), k, r)).collect();
        let mut o: Vec<(u32, u32, u32)> =
            one.items.iter().map(|&(k, r)| (one.part_of(k), k, r)).collect();
        t.sort_unstable();
        o.sort_unstable();
        assert_eq!(t, o);
    }

    #[test]
    fn grouping_identity_and_pairing() {
        assert_eq!(group_by_workload(&[3, 1, 2], 1), vec![0, 1, 2]);
        let order = group_by_workload(&[9, 1, 9, 1], 2);
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn grouping_preserves_join_result() {
        let build = gen_skewed(2048, 25, 3);
        let probe = gen_probe(&build, 2048, 1.0, 4).unwrap();
        let arena = Arc::new(Arena::new(join_arena_bytes(2048, 2048)).unwrap());
        let table = HashTable::new(arena, TableLayout::simple(default_bucket_count(2048), 0));
        let bs = JoinStream::from_relation(&build);
        run_build([&table, &table], &bs, &Ownership::Prefix(1000), 2048).unwrap();
        let ps = JoinStream::from_relation(&probe);
        let plain = run_probe(&table, &ps, &Ownership::Prefix(ps.len()), 2048).unwrap();
        let measures: Vec<u32> = ps
            .items
            .iter()
            .map(|&(k, _)| table.key_list_len(table.bucket_of(ps.part_of(k), k)))
            .collect();
        let order = group_by_workload(&measures, 16);
        let grouped_stream = ps.permuted(&order);
        let grouped =
            run_probe(&table, &grouped_stream, &Ownership::Prefix(700), 2048).unwrap();
        assert_eq!(plain.result.sorted(), grouped.result.sorted());
    }

    #[test]
    fn step_pipeline_equals_fused_execution() {
        let build = gen_skewed(1024, 25, 8);
        let probe = gen_probe(&build, 1024, 0.5, 9).unwrap();
        let profile = crate::device::canned_profiles().0;

        // Fused path.
        let fused = shj_join(&build, &probe, 0).sorted();

        // Step-at-a-time path with a handoff after every step.
        let arena = Arc::new(Arena::new(join_arena_bytes(1024, 1024)).unwrap());
        let table = HashTable::new(arena, TableLayout::simple(default_bucket_count(1024), 0));
        let bs = JoinStream::from_relation(&build);
        let mut ga = GroupAlloc::new(table.arena(), 2048);
        let mut pipe = StepPipeline::new(&table, &bs);
        for step in StepId::BUILD {
            pipe.run_step(step, 0..bs.len(), &mut ga, &profile).unwrap();
        }
        let ps = JoinStream::from_relation(&probe);
        let mut pipe = StepPipeline::new(&table, &ps);
        let mut pairs = Vec::new();
        for step in StepId::PROBE {
            let (out, cost) = pipe.run_step(step, 0..ps.len(), &mut ga, &profile).unwrap();
            assert!(cost >= 0.0);
            if let StepOutput::Pairs(p) = out {
                pairs = p;
            }
        }
        pairs.sort_unstable();
        assert_eq!(pairs, fused);
    }

    #[test]
    fn coarse_join_matches_fine_join() {
        let build = gen_skewed(4096, 25, 2);
        let probe = gen_probe(&build, 4096, 1.0, 3).unwrap();
        let arena = Arc::new(Arena::new(32 << 20).unwrap());
        let (bs, _) = radix_partition(&build, 4, 1, arena.clone(), 2048, 0, None).unwrap();
        let (ps, _) = radix_partition(&probe, 4, 1, arena.clone(), 2048, 0, None).unwrap();
        let bb = stream_bounds(&bs, 16);
        let pb = stream_bounds(&ps, 16);
        let (result, works) =
            run_coarse_pairs(&bs, &bb, &ps, &pb, 16, &arena, 2048).unwrap();
        assert_eq!(works.len(), 16);
        let fine = phj_join(&build, &probe, 4, 1, 0).unwrap().sorted();
        assert_eq!(result.sorted(), fine);
    }

    fn stream_bounds(stream: &JoinStream, parts: usize) -> Vec<usize> {
        let mut bounds = vec![0usize; parts + 1];
        for &(k, _) in &stream.items {
            bounds[stream.part_of(k) as usize + 1] += 1;
        }
        for i in 1..=parts {
            bounds[i] += bounds[i - 1];
        }
        bounds
    }
}
