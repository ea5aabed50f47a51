//! Chained hash table over arena offsets: an array of bucket headers, a key
//! list per bucket holding the distinct keys that hash there, and a rid list
//! per key.
//!
//! Node layout inside the arena (all fields `u32`, offsets are arena byte
//! offsets with `NONE` as the absent sentinel, so tables are relocatable):
//!
//! ```text
//! KeyNode: [key][rid_head][next][rid_count]      16 bytes
//! RidNode: [rid][next]                            8 bytes
//! ```
//!
//! Mutation runs under a per-bucket spin latch; lookups are latch-free and
//! rely on the phase barrier between build and probe.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::arena::{Arena, ArenaError, GroupAlloc};

/// Absent-offset sentinel.
pub const NONE: u32 = u32::MAX;

pub const KEY_NODE_BYTES: usize = 16;
pub const RID_NODE_BYTES: usize = 8;

/// Bit-exact 32-bit MurmurHash2 of the four little-endian bytes of `key`.
#[inline]
pub fn murmur2(key: u32, seed: u32) -> u32 {
    const M: u32 = 0x5bd1_e995;
    const R: u32 = 24;
    let mut h: u32 = seed ^ 4;
    let mut k = key;
    k = k.wrapping_mul(M);
    k ^= k >> R;
    k = k.wrapping_mul(M);
    h = h.wrapping_mul(M);
    h ^= k;
    h ^= h >> 13;
    h = h.wrapping_mul(M);
    h ^ (h >> 15)
}

/// Header of one hash bucket.
#[derive(Debug)]
pub struct BucketHeader {
    /// Total tuples in the bucket (sum of rid-list lengths).
    count: AtomicU32,
    /// Distinct keys in the bucket; the probe-side workload measure.
    key_count: AtomicU32,
    /// Offset of the first key node, or NONE.
    key_head: AtomicU32,
    latch: AtomicU32,
}

impl BucketHeader {
    fn new() -> Self {
        BucketHeader {
            count: AtomicU32::new(0),
            key_count: AtomicU32::new(0),
            key_head: AtomicU32::new(NONE),
            latch: AtomicU32::new(0),
        }
    }

    #[inline]
    fn lock(&self) {
        while self
            .latch
            .compare_exchange_weak(0, 1, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            std::hint::spin_loop();
        }
    }

    #[inline]
    fn unlock(&self) {
        self.latch.store(0, Ordering::Release);
    }
}

/// Table-sizing and addressing parameters.
#[derive(Clone, Copy, Debug)]
pub struct TableLayout {
    /// Buckets per partition region, power of two.
    pub buckets_per_partition: u32,
    /// Number of partition regions (1 for a simple join).
    pub partitions: u32,
    /// Hash bits consumed by radix partitioning; bucket selection starts
    /// above them to avoid correlation.
    pub hash_shift: u32,
    pub hash_seed: u32,
}

impl TableLayout {
    pub fn simple(num_buckets: u32, hash_seed: u32) -> Self {
        assert!(num_buckets.is_power_of_two());
        TableLayout { buckets_per_partition: num_buckets, partitions: 1, hash_shift: 0, hash_seed }
    }

    pub fn partitioned(buckets_per_partition: u32, partitions: u32, radix_bits: u32, hash_seed: u32) -> Self {
        assert!(buckets_per_partition.is_power_of_two());
        TableLayout {
            buckets_per_partition,
            partitions,
            hash_shift: radix_bits,
            hash_seed,
        }
    }

    pub fn total_buckets(&self) -> usize {
        self.buckets_per_partition as usize * self.partitions as usize
    }
}

/// Next power of two at or above `n`, at least 1.
pub fn default_bucket_count(n: usize) -> u32 {
    (n.max(1) as u32).next_power_of_two()
}

pub struct HashTable {
    buckets: Box<[BucketHeader]>,
    layout: TableLayout,
    arena: Arc<Arena>,
}

impl HashTable {
    pub fn new(arena: Arc<Arena>, layout: TableLayout) -> Self {
        let mut v = Vec::with_capacity(layout.total_buckets());
        v.resize_with(layout.total_buckets(), BucketHeader::new);
        HashTable { buckets: v.into_boxed_slice(), layout, arena }
    }

    pub fn layout(&self) -> &TableLayout {
        &self.layout
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    /// Bucket index for `key` inside partition region `part`.
    #[inline]
    pub fn bucket_of(&self, part: u32, key: u32) -> u32 {
        let h = murmur2(key, self.layout.hash_seed);
        let local = (h >> self.layout.hash_shift) & (self.layout.buckets_per_partition - 1);
        part * self.layout.buckets_per_partition + local
    }

    #[inline]
    pub fn bucket_tuple_count(&self, bucket: u32) -> u32 {
        self.buckets[bucket as usize].count.load(Ordering::Relaxed)
    }

    /// Number of distinct keys in the bucket's key list.
    #[inline]
    pub fn key_list_len(&self, bucket: u32) -> u32 {
        self.buckets[bucket as usize].key_count.load(Ordering::Relaxed)
    }

    pub fn total_tuples(&self) -> u64 {
        self.buckets.iter().map(|b| b.count.load(Ordering::Relaxed) as u64).sum()
    }

    fn key_node(&self, off: u32) -> (u32, u32, u32, u32) {
        let o = off as usize;
        (
            self.arena.load_u32(o),
            self.arena.load_u32(o + 4),
            self.arena.load_u32(o + 8),
            self.arena.load_u32(o + 12),
        )
    }

    /// Inserts one `(key, rid)` pair: bucket lookup, key-list search with
    /// creation on miss, rid prepend, all under the bucket latch.
    pub fn insert(&self, ga: &mut GroupAlloc, part: u32, key: u32, rid: u32) -> Result<(), ArenaError> {
        let bucket = self.bucket_of(part, key);
        let hdr = &self.buckets[bucket as usize];
        hdr.lock();
        let res = self.insert_locked(hdr, ga, key, rid);
        hdr.unlock();
        res
    }

    fn insert_locked(
        &self,
        hdr: &BucketHeader,
        ga: &mut GroupAlloc,
        key: u32,
        rid: u32,
    ) -> Result<(), ArenaError> {
        let mut node = hdr.key_head.load(Ordering::Relaxed);
        let mut found = NONE;
        while node != NONE {
            let (k, _, next, _) = self.key_node(node);
            if k == key {
                found = node;
                break;
            }
            node = next;
        }
        let key_off = if found != NONE {
            found
        } else {
            let off = ga.alloc(KEY_NODE_BYTES)?;
            self.arena.store_u32(off, key);
            self.arena.store_u32(off + 4, NONE);
            self.arena.store_u32(off + 8, hdr.key_head.load(Ordering::Relaxed));
            self.arena.store_u32(off + 12, 0);
            hdr.key_head.store(off as u32, Ordering::Relaxed);
            hdr.key_count.fetch_add(1, Ordering::Relaxed);
            off as u32
        };
        let rid_off = ga.alloc(RID_NODE_BYTES)?;
        let ko = key_off as usize;
        self.arena.store_u32(rid_off, rid);
        self.arena.store_u32(rid_off + 4, self.arena.load_u32(ko + 4));
        self.arena.store_u32(ko + 4, rid_off as u32);
        let rc = self.arena.load_u32(ko + 12);
        self.arena.store_u32(ko + 12, rc + 1);
        hdr.count.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Step-wise mutation: finds or creates the key node for `key` under the
    /// bucket latch and returns its offset.
    pub fn find_or_create_key(
        &self,
        ga: &mut GroupAlloc,
        bucket: u32,
        key: u32,
    ) -> Result<u32, ArenaError> {
        let hdr = &self.buckets[bucket as usize];
        hdr.lock();
        let mut node = hdr.key_head.load(Ordering::Relaxed);
        while node != NONE {
            let (k, _, next, _) = self.key_node(node);
            if k == key {
                hdr.unlock();
                return Ok(node);
            }
            node = next;
        }
        let off = match ga.alloc(KEY_NODE_BYTES) {
            Ok(o) => o,
            Err(e) => {
                hdr.unlock();
                return Err(e);
            }
        };
        self.arena.store_u32(off, key);
        self.arena.store_u32(off + 4, NONE);
        self.arena.store_u32(off + 8, hdr.key_head.load(Ordering::Relaxed));
        self.arena.store_u32(off + 12, 0);
        hdr.key_head.store(off as u32, Ordering::Relaxed);
        hdr.key_count.fetch_add(1, Ordering::Relaxed);
        hdr.unlock();
        Ok(off as u32)
    }

    /// Step-wise mutation: prepends `rid` to the rid list of the key node at
    /// `key_off` under the bucket latch.
    pub fn append_rid(
        &self,
        ga: &mut GroupAlloc,
        bucket: u32,
        key_off: u32,
        rid: u32,
    ) -> Result<(), ArenaError> {
        let hdr = &self.buckets[bucket as usize];
        hdr.lock();
        let res = (|| {
            let rid_off = ga.alloc(RID_NODE_BYTES)?;
            let ko = key_off as usize;
            self.arena.store_u32(rid_off, rid);
            self.arena.store_u32(rid_off + 4, self.arena.load_u32(ko + 4));
            self.arena.store_u32(ko + 4, rid_off as u32);
            let rc = self.arena.load_u32(ko + 12);
            self.arena.store_u32(ko + 12, rc + 1);
            hdr.count.fetch_add(1, Ordering::Relaxed);
            Ok(())
        })();
        hdr.unlock();
        res
    }

    /// Probe-side key-list search. Returns the key node offset on a match.
    #[inline]
    pub fn find_key(&self, bucket: u32, key: u32) -> Option<u32> {
        let mut node = self.buckets[bucket as usize].key_head.load(Ordering::Relaxed);
        while node != NONE {
            let (k, _, next, _) = self.key_node(node);
            if k == key {
                return Some(node);
            }
            node = next;
        }
        None
    }

    #[inline]
    pub fn rid_count(&self, key_off: u32) -> u32 {
        self.arena.load_u32(key_off as usize + 12)
    }

    /// Iterates the rids stored under a key node.
    pub fn rids_of(&self, key_off: u32) -> RidIter<'_> {
        RidIter { table: self, node: self.arena.load_u32(key_off as usize + 4) }
    }

    /// All rids inserted for `key` in partition region `part`.
    pub fn lookup(&self, part: u32, key: u32) -> Vec<u32> {
        match self.find_key(self.bucket_of(part, key), key) {
            Some(off) => self.rids_of(off).collect(),
            None => Vec::new(),
        }
    }

    /// Iterates every `(bucket, key, rid)` triple in the table.
    pub fn iter_pairs(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        (0..self.buckets.len() as u32).flat_map(move |b| {
            let mut out = Vec::new();
            let mut node = self.buckets[b as usize].key_head.load(Ordering::Relaxed);
            while node != NONE {
                let (k, _, next, _) = self.key_node(node);
                for rid in self.rids_of(node) {
                    out.push((b, k, rid));
                }
                node = next;
            }
            out
        })
    }

    /// Folds `src` into `self`, consuming it. Both tables must share the
    /// same layout. Returns the number of pairs moved.
    pub fn merge_from(&self, ga: &mut GroupAlloc, src: HashTable) -> Result<u64, ArenaError> {
        assert_eq!(
            src.layout.buckets_per_partition, self.layout.buckets_per_partition,
            "merge requires identical bucket counts"
        );
        assert_eq!(src.layout.hash_seed, self.layout.hash_seed);
        let mut moved = 0u64;
        for (bucket, key, rid) in src.iter_pairs() {
            let hdr = &self.buckets[bucket as usize];
            hdr.lock();
            let res = self.insert_locked(hdr, ga, key, rid);
            hdr.unlock();
            res?;
            moved += 1;
        }
        Ok(moved)
    }
}

pub struct RidIter<'a> {
    table: &'a HashTable,
    node: u32,
}

impl Iterator for RidIter<'_> {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        if self.node == NONE {
            return None;
        }
        let o = self.node as usize;
        let rid = self.table.arena.load_u32(o);
        self.node = self.table.arena.load_u32(o + 4);
        Some(rid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::DEFAULT_BLOCK_SIZE;
    use std::collections::HashMap;

    /// Reference MurmurHash2 over an arbitrary byte slice, straight from the
    /// published algorithm. Kept independent of the u32 fast path it checks.
    fn murmur2_reference(data: &[u8], seed: u32) -> u32 {
        const M: u32 = 0x5bd1_e995;
        const R: u32 = 24;
        let mut h: u32 = seed ^ data.len() as u32;
        let mut chunks = data.chunks_exact(4);
        for c in &mut chunks {
            let mut k = u32::from_le_bytes(c.try_into().unwrap());
            k = k.wrapping_mul(M);
            k ^= k >> R;
            k = k.wrapping_mul(M);
            h = h.wrapping_mul(M);
            h ^= k;
        }
        let rem = chunks.remainder();
        if rem.len() >= 3 {
            h ^= (rem[2] as u32) << 16;
        }
        if rem.len() >= 2 {
            h ^= (rem[1] as u32) << 8;
        }
        if !rem.is_empty() {
            h ^= rem[0] as u32;
            h = h.wrapping_mul(M);
        }
        h ^= h >> 13;
        h = h.wrapping_mul(M);
        h ^ (h >> 15)
    }

    fn small_table(buckets: u32) -> HashTable {
        let arena = Arc::new(Arena::new(4 << 20).unwrap());
        HashTable::new(arena, TableLayout::simple(buckets, 0))
    }

    #[test]
    fn murmur_matches_reference_on_le_words() {
        for seed in [0u32, 1, 0x9747_b28c, u32::MAX] {
            for key in [0u32, 1, 5, 0xdead_beef, u32::MAX, 0x8000_0000] {
                assert_eq!(murmur2(key, seed), murmur2_reference(&key.to_le_bytes(), seed));
            }
        }
        // Spot determinism.
        assert_eq!(murmur2(77, 3), murmur2(77, 3));
    }

    #[test]
    fn murmur_bucket_histogram_chi_square() {
        let buckets = 1usize << 16;
        let samples = 1usize << 20;
        let mut hist = vec![0u32; buckets];
        for i in 0..samples {
            let h = murmur2(i as u32, 0x9747_b28c);
            hist[(h & (buckets as u32 - 1)) as usize] += 1;
        }
        let expected = samples as f64 / buckets as f64;
        let chi2: f64 = hist.iter().map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        }).sum();
        let df = (buckets - 1) as f64;
        let sigma = (2.0 * df).sqrt();
        assert!(
            (chi2 - df).abs() <= 3.0 * sigma,
            "chi2 {chi2} outside 3 sigma of df {df}"
        );
    }

    #[test]
    fn duplicate_key_builds_one_key_node() {
        let t = small_table(16);
        let mut ga = GroupAlloc::new(t.arena(), DEFAULT_BLOCK_SIZE);
        t.insert(&mut ga, 0, 5, 1).unwrap();
        t.insert(&mut ga, 0, 5, 2).unwrap();
        let bucket = t.bucket_of(0, 5);
        assert_eq!(t.key_list_len(bucket), 1);
        assert_eq!(t.bucket_tuple_count(bucket), 2);
        let mut rids = t.lookup(0, 5);
        rids.sort_unstable();
        assert_eq!(rids, vec![1, 2]);
    }

    #[test]
    fn bucket_counts_conserve_inserts() {
        let t = small_table(4);
        let mut ga = GroupAlloc::new(t.arena(), DEFAULT_BLOCK_SIZE);
        for k in 0..16u32 {
            t.insert(&mut ga, 0, k * 131, k).unwrap();
        }
        assert_eq!(t.total_tuples(), 16);
    }

    #[test]
    fn lookup_on_empty_table_is_empty() {
        let t = small_table(8);
        assert!(t.lookup(0, 42).is_empty());
    }

    #[test]
    fn random_workload_matches_reference_map() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let t = small_table(1 << 10);
        let mut ga = GroupAlloc::new(t.arena(), DEFAULT_BLOCK_SIZE);
        let mut oracle: HashMap<u32, Vec<u32>> = HashMap::new();
        for rid in 0..100_000u32 {
            let key = rng.random_range(0..20_000u32);
            t.insert(&mut ga, 0, key, rid).unwrap();
            oracle.entry(key).or_default().push(rid);
        }
        for _ in 0..10_000 {
            let key = rng.random_range(0..25_000u32);
            let mut got = t.lookup(0, key);
            got.sort_unstable();
            let mut want = oracle.get(&key).cloned().unwrap_or_default();
            want.sort_unstable();
            assert_eq!(got, want, "mismatch for key {key}");
        }
    }

    #[test]
    fn whole_relation_matches_linear_scan() {
        let rel = crate::relation::gen_skewed(10_000, 25, 4);
        let t = small_table(default_bucket_count(rel.len()));
        let mut ga = GroupAlloc::new(t.arena(), DEFAULT_BLOCK_SIZE);
        for (key, rid) in rel.pairs() {
            t.insert(&mut ga, 0, key, rid).unwrap();
        }
        for probe in [rel.key(0), rel.key(5000), 0xffff_fffe] {
            let mut got = t.lookup(0, probe);
            got.sort_unstable();
            let mut want: Vec<u32> =
                rel.pairs().filter(|&(k, _)| k == probe).map(|(_, r)| r).collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn concurrent_build_equals_serial_build() {
        let rel = crate::relation::gen_skewed(40_000, 25, 8);
        let serial = small_table(1 << 12);
        let mut ga = GroupAlloc::new(serial.arena(), DEFAULT_BLOCK_SIZE);
        for (key, rid) in rel.pairs() {
            serial.insert(&mut ga, 0, key, rid).unwrap();
        }

        let conc = small_table(1 << 12);
        std::thread::scope(|s| {
            for chunk in 0..4 {
                let conc = &conc;
                let rel = &rel;
                s.spawn(move || {
                    let mut ga = GroupAlloc::new(conc.arena(), DEFAULT_BLOCK_SIZE);
                    let len = rel.len() / 4;
                    for i in chunk * len..(chunk + 1) * len {
                        conc.insert(&mut ga, 0, rel.key(i), rel.rid(i)).unwrap();
                    }
                });
            }
        });

        let collect = |t: &HashTable| {
            let mut v: Vec<(u32, u32)> = t.iter_pairs().map(|(_, k, r)| (k, r)).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(collect(&serial), collect(&conc));
        // One key node per distinct key even under concurrent same-key inserts.
        for b in 0..1u32 << 12 {
            let mut keys = Vec::new();
            let mut node = conc.buckets[b as usize].key_head.load(Ordering::Relaxed);
            while node != NONE {
                let (k, _, next, _) = conc.key_node(node);
                keys.push(k);
                node = next;
            }
            let total = keys.len();
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(total, keys.len(), "duplicate key node in bucket {b}");
        }
    }

    #[test]
    fn merge_identity_and_split_equivalence() {
        let rel = crate::relation::gen_uniform(8192, (0, 1 << 20), 21);

        // merge(empty, T) == T
        let t = small_table(1 << 10);
        let mut ga = GroupAlloc::new(t.arena(), DEFAULT_BLOCK_SIZE);
        for (key, rid) in rel.pairs() {
            t.insert(&mut ga, 0, key, rid).unwrap();
        }
        let dst = small_table(1 << 10);
        let mut dga = GroupAlloc::new(dst.arena(), DEFAULT_BLOCK_SIZE);
        let moved = dst.merge_from(&mut dga, t).unwrap();
        assert_eq!(moved, 8192);

        // Table built from two disjoint halves then merged equals the
        // single-pass table per key.
        let single = small_table(1 << 10);
        let mut sga = GroupAlloc::new(single.arena(), DEFAULT_BLOCK_SIZE);
        for (key, rid) in rel.pairs() {
            single.insert(&mut sga, 0, key, rid).unwrap();
        }
        let collect = |t: &HashTable| {
            let mut v: Vec<(u32, u32)> = t.iter_pairs().map(|(_, k, r)| (k, r)).collect();
            v.sort_unstable();
            v
        };
        let half_a = small_table(1 << 10);
        let mut aga = GroupAlloc::new(half_a.arena(), DEFAULT_BLOCK_SIZE);
        let half_b = small_table(1 << 10);
        let mut bga = GroupAlloc::new(half_b.arena(), DEFAULT_BLOCK_SIZE);
        for (i, (key, rid)) in rel.pairs().enumerate() {
            if i < 4096 {
                half_a.insert(&mut aga, 0, key, rid).unwrap();
            } else {
                half_b.insert(&mut bga, 0, key, rid).unwrap();
            }
        }
        half_a.merge_from(&mut aga, half_b).unwrap();
        assert_eq!(collect(&half_a), collect(&single));
        assert_eq!(collect(&half_a), collect(&dst));
    }

    #[test]
    fn arena_exhaustion_propagates() {
        let arena = Arc::new(Arena::new(64).unwrap());
        let t = HashTable::new(arena, TableLayout::simple(4, 0));
        let mut ga = GroupAlloc::new(t.arena(), 32);
        t.insert(&mut ga, 0, 1, 1).unwrap();
        t.insert(&mut ga, 0, 2, 2).err().map(|e| {
            assert!(matches!(e, ArenaError::Exhausted { .. }));
        });
        // Keep filling until exhaustion definitely fires.
        let mut failed = false;
        for k in 3..100u32 {
            if t.insert(&mut ga, 0, k, k).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed);
    }
}
