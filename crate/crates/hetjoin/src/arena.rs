//! Pre-allocated arena with block-granular concurrent allocation.
//!
//! A single global cursor advances in block grants (lock-free compare-and-
//! swap, so exhausted attempts never move it), and each work group bumps a
//! local cursor inside its granted block. There is no free or reuse; a join
//! phase resets the arena wholesale. Storage is an array of `AtomicU32`
//! words so that disjoint regions can be written from many threads without
//! further coordination.

use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};

use thiserror::Error;

/// Default block size in bytes for group-level allocation.
pub const DEFAULT_BLOCK_SIZE: usize = 2048;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArenaError {
    #[error("arena capacity must be positive")]
    ZeroCapacity,
    #[error("arena exhausted: cursor {cursor} + request {request} exceeds capacity {capacity}")]
    Exhausted { cursor: usize, request: usize, capacity: usize },
    #[error("block full: used {used} + request {request} exceeds block size {size}")]
    BlockFull { used: usize, request: usize, size: usize },
    #[error("allocation request must be positive")]
    ZeroRequest,
}

/// Fixed-capacity byte region with a monotone global cursor.
#[derive(Debug)]
pub struct Arena {
    words: Box<[AtomicU32]>,
    capacity: usize,
    cursor: AtomicUsize,
    grant_ops: AtomicU64,
}

impl Arena {
    pub fn new(capacity_bytes: usize) -> Result<Arena, ArenaError> {
        if capacity_bytes == 0 {
            return Err(ArenaError::ZeroCapacity);
        }
        let n_words = capacity_bytes.div_ceil(4);
        let mut v = Vec::with_capacity(n_words);
        v.resize_with(n_words, || AtomicU32::new(0));
        Ok(Arena {
            words: v.into_boxed_slice(),
            capacity: capacity_bytes,
            cursor: AtomicUsize::new(0),
            grant_ops: AtomicU64::new(0),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Current cursor in bytes. Equals the sum of all granted block sizes.
    pub fn cursor(&self) -> usize {
        self.cursor.load(Ordering::Acquire)
    }

    /// Number of successful global-cursor advances.
    pub fn grant_ops(&self) -> u64 {
        self.grant_ops.load(Ordering::Relaxed)
    }

    /// Advances the global cursor by `block_size` and returns the grant.
    /// Concurrent callers receive pairwise-disjoint grants; a failed attempt
    /// leaves the cursor untouched.
    pub fn grant_block(&self, block_size: usize) -> Result<BlockGrant, ArenaError> {
        if block_size == 0 {
            return Err(ArenaError::ZeroRequest);
        }
        let mut cur = self.cursor.load(Ordering::Relaxed);
        loop {
            if cur + block_size > self.capacity {
                return Err(ArenaError::Exhausted {
                    cursor: cur,
                    request: block_size,
                    capacity: self.capacity,
                });
            }
            match self.cursor.compare_exchange_weak(
                cur,
                cur + block_size,
                Ordering::AcqRel,
                Ordering::Relaxed,
            ) {
                Ok(_) => {
                    self.grant_ops.fetch_add(1, Ordering::Relaxed);
                    return Ok(BlockGrant { offset: cur, size: block_size, local_cursor: 0 });
                }
                Err(seen) => cur = seen,
            }
        }
    }

    /// Resets the cursor. Requires exclusive access, so this is only possible
    /// between phases when no grants are live.
    pub fn reset(&mut self) {
        self.cursor.store(0, Ordering::Release);
    }

    #[inline]
    pub fn store_u32(&self, byte_offset: usize, value: u32) {
        debug_assert_eq!(byte_offset % 4, 0, "u32 stores must be word aligned");
        debug_assert!(byte_offset + 4 <= self.capacity);
        self.words[byte_offset / 4].store(value, Ordering::Relaxed);
    }

    #[inline]
    pub fn load_u32(&self, byte_offset: usize) -> u32 {
        debug_assert_eq!(byte_offset % 4, 0, "u32 loads must be word aligned");
        self.words[byte_offset / 4].load(Ordering::Relaxed)
    }
}

/// A contiguous byte region granted to one work group. Local allocation is
/// a plain bump; the grant is owned by a single group at a time, mirroring
/// requests made by a designated leader item.
#[derive(Debug)]
pub struct BlockGrant {
    offset: usize,
    size: usize,
    local_cursor: usize,
}

impl BlockGrant {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn used(&self) -> usize {
        self.local_cursor
    }

    pub fn remaining(&self) -> usize {
        self.size - self.local_cursor
    }

    /// Bumps the local cursor by exactly `nbytes` and returns the absolute
    /// arena byte offset of the allocation.
    pub fn alloc(&mut self, nbytes: usize) -> Result<usize, ArenaError> {
        if nbytes == 0 {
            return Err(ArenaError::ZeroRequest);
        }
        if self.local_cursor + nbytes > self.size {
            return Err(ArenaError::BlockFull {
                used: self.local_cursor,
                request: nbytes,
                size: self.size,
            });
        }
        let at = self.offset + self.local_cursor;
        self.local_cursor += nbytes;
        Ok(at)
    }
}

/// Per-group allocator that chains block grants from a shared arena.
///
/// With a block size of `None` every request goes straight to the global
/// cursor (the basic allocator); otherwise requests are served from the
/// current block and a fresh block is granted on overflow.
pub struct GroupAlloc<'a> {
    arena: &'a Arena,
    block_size: Option<usize>,
    current: Option<BlockGrant>,
}

impl<'a> GroupAlloc<'a> {
    pub fn new(arena: &'a Arena, block_size: usize) -> Self {
        GroupAlloc { arena, block_size: Some(block_size), current: None }
    }

    /// Basic allocator: one global-cursor operation per request.
    pub fn basic(arena: &'a Arena) -> Self {
        GroupAlloc { arena, block_size: None, current: None }
    }

    pub fn alloc(&mut self, nbytes: usize) -> Result<usize, ArenaError> {
        let Some(block_size) = self.block_size else {
            return Ok(self.arena.grant_block(nbytes)?.offset);
        };
        if nbytes > block_size {
            // Oversized request served by a dedicated grant.
            return Ok(self.arena.grant_block(nbytes)?.offset);
        }
        if let Some(grant) = self.current.as_mut() {
            match grant.alloc(nbytes) {
                Ok(at) => return Ok(at),
                Err(ArenaError::BlockFull { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let mut grant = self.arena.grant_block(block_size)?;
        let at = grant.alloc(nbytes)?;
        self.current = Some(grant);
        Ok(at)
    }

    pub fn arena(&self) -> &Arena {
        self.arena
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn constructor_and_zero_capacity() {
        let a = Arena::new(1 << 20).unwrap();
        assert_eq!(a.capacity(), 1 << 20);
        assert_eq!(a.cursor(), 0);
        assert_eq!(Arena::new(0).unwrap_err(), ArenaError::ZeroCapacity);
    }

    #[test]
    fn big_arena_matches_buffer_cap() {
        let a = Arena::new(512 << 20).unwrap();
        assert_eq!(a.capacity(), 512 << 20);
    }

    #[test]
    fn sequential_grants_until_exhausted() {
        let a = Arena::new(8 << 10).unwrap();
        for expected in [0usize, 2048, 4096, 6144] {
            let g = a.grant_block(2048).unwrap();
            assert_eq!(g.offset(), expected);
        }
        assert!(matches!(a.grant_block(2048), Err(ArenaError::Exhausted { .. })));
        assert_eq!(a.cursor(), 8 << 10);
    }

    #[test]
    fn whole_capacity_single_grant() {
        let a = Arena::new(4096).unwrap();
        let g = a.grant_block(4096).unwrap();
        assert_eq!(g.offset(), 0);
        assert!(matches!(a.grant_block(1), Err(ArenaError::Exhausted { .. })));
    }

    #[test]
    fn local_alloc_bumps_exactly() {
        let a = Arena::new(4096).unwrap();
        let mut g = a.grant_block(2048).unwrap();
        assert_eq!(g.alloc(12).unwrap(), 0);
        assert_eq!(g.alloc(12).unwrap(), 12);
        assert_eq!(g.alloc(12).unwrap(), 24);
    }

    #[test]
    fn local_alloc_boundary_and_block_full() {
        let a = Arena::new(4096).unwrap();
        let mut g = a.grant_block(64).unwrap();
        g.alloc(40).unwrap();
        assert_eq!(g.alloc(24).unwrap(), g.offset() + 40);
        assert!(matches!(g.alloc(1), Err(ArenaError::BlockFull { .. })));
    }

    #[test]
    fn concurrent_grants_disjoint_and_conserved() {
        let a = Arena::new(1 << 20).unwrap();
        let offsets = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..64 {
                s.spawn(|| {
                    let mut local = Vec::with_capacity(100);
                    for _ in 0..100 {
                        local.push(a.grant_block(64).unwrap().offset());
                    }
                    offsets.lock().unwrap().extend(local);
                });
            }
        });
        let mut offs = offsets.into_inner().unwrap();
        assert_eq!(offs.len(), 6400);
        offs.sort_unstable();
        // Disjointness checked by sorting grant offsets.
        for w in offs.windows(2) {
            assert!(w[0] + 64 <= w[1]);
        }
        assert_eq!(a.cursor(), 409_600);
        assert_eq!(a.grant_ops(), 6400);
    }

    #[test]
    fn shared_grant_chain_allocations_disjoint() {
        // 256 allocations of 16 bytes through a chained group allocator.
        let a = Arena::new(1 << 16).unwrap();
        let mut ga = GroupAlloc::new(&a, 256);
        let mut offs = Vec::new();
        for _ in 0..256 {
            offs.push(ga.alloc(16).unwrap());
        }
        offs.sort_unstable();
        for w in offs.windows(2) {
            assert!(w[0] + 16 <= w[1]);
        }
    }

    #[test]
    fn grant_op_count_matches_ceiling_formula() {
        // One group allocating uniform items: ops = ceil(total/B).
        for block in [64usize, 128, 256, 1024, 2048] {
            let a = Arena::new(1 << 20).unwrap();
            let mut ga = GroupAlloc::new(&a, block);
            let items = 1000;
            let sz = 16;
            for _ in 0..items {
                ga.alloc(sz).unwrap();
            }
            let total = items * sz;
            assert_eq!(a.grant_ops(), (total as u64).div_ceil(block as u64));
        }
    }

    #[test]
    fn grant_ops_non_increasing_in_block_size() {
        let mut last = u64::MAX;
        let mut block = 64usize;
        while block <= 8192 {
            let a = Arena::new(4 << 20).unwrap();
            let mut groups: Vec<GroupAlloc> = (0..8).map(|_| GroupAlloc::new(&a, block)).collect();
            for i in 0..4000 {
                let sz = [8, 16, 32, 64][i % 4];
                groups[i % 8].alloc(sz).unwrap();
            }
            let ops = a.grant_ops();
            assert!(ops <= last, "ops grew from {last} to {ops} at block {block}");
            last = ops;
            block *= 2;
        }
    }

    #[test]
    fn basic_allocator_one_op_per_item() {
        let a = Arena::new(1 << 20).unwrap();
        let mut ga = GroupAlloc::basic(&a);
        for _ in 0..100 {
            ga.alloc(16).unwrap();
        }
        assert_eq!(a.grant_ops(), 100);
    }

    #[test]
    fn store_load_round_trip() {
        let a = Arena::new(256).unwrap();
        a.store_u32(0, 0xdead_beef);
        a.store_u32(252, 42);
        assert_eq!(a.load_u32(0), 0xdead_beef);
        assert_eq!(a.load_u32(252), 42);
    }
}
