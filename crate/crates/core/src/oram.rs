//! Path ORAM over an in-memory bucket tree.
//!
//! The tree lives on the untrusted side: every bucket slot touched is
//! reported as an untrusted block access addressed by its slot index. The
//! position map and stash stay inside the enclave. An access reads one
//! root-to-leaf path, remaps the block to a fresh uniform leaf, and writes the
//! same path back, greedily pushing stash blocks as deep as they can go.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::record::{ct_assign, ct_select_u64};
use crate::trace::{self, AccessOp, Granularity, Region};

/// File id under which tree slots appear in traces.
pub const ORAM_FILE: u64 = u64::MAX - 1;

pub const DEFAULT_Z: usize = 4;
pub const DEFAULT_STASH_CAPACITY: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OramOp {
    Read,
    Write,
}

struct Entry {
    id: u64,
    payload: Box<[u8]>,
}

pub struct OramState {
    n: u64,
    z: usize,
    levels: u32,
    payload_size: usize,
    slots: Vec<Option<Entry>>,
    position: Vec<u64>,
    stash: Vec<Entry>,
    stash_capacity: usize,
    max_stash: usize,
    rng: ChaCha8Rng,
    file_id: u64,
    accesses: u64,
    last_leaf: u64,
}

impl std::fmt::Debug for OramState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OramState")
            .field("n", &self.n)
            .field("z", &self.z)
            .field("levels", &self.levels)
            .field("payload_size", &self.payload_size)
            .field("stash", &self.stash.len())
            .field("max_stash", &self.max_stash)
            .finish()
    }
}

/// Allocate a tree for `n` blocks of `payload_size` bytes, `z` slots per
/// bucket, with the position map drawn from `seed`.
pub fn oram_init(n: u64, z: usize, payload_size: usize, seed: u64) -> Result<OramState> {
    OramState::new(n, z, payload_size, seed)
}

impl OramState {
    pub fn new(n: u64, z: usize, payload_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || z == 0 {
            return Err(Error::InvalidMeta("ORAM needs n >= 1 and z >= 1".into()));
        }
        let levels = n.next_power_of_two().trailing_zeros();
        let buckets = (1usize << (levels + 1)) - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = 1u64 << levels;
        let position = (0..n).map(|_| rng.gen_range(0..leaves)).collect();
        Ok(OramState {
            n,
            z,
            levels,
            payload_size,
            slots: (0..buckets * z).map(|_| None).collect(),
            position,
            stash: Vec::new(),
            stash_capacity: DEFAULT_STASH_CAPACITY,
            max_stash: 0,
            rng,
            file_id: ORAM_FILE,
            accesses: 0,
            last_leaf: 0,
        })
    }

    pub fn with_stash_capacity(mut self, capacity: usize) -> Self {
        self.stash_capacity = capacity;
        self
    }

    pub fn with_file_id(mut self, file_id: u64) -> Self {
        self.file_id = file_id;
        self
    }

    pub fn block_count(&self) -> u64 {
        self.n
    }

    /// Tree height `L`: leaves sit at depth `L`, so a path has `L + 1` buckets.
    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn bucket_count(&self) -> usize {
        self.slots.len() / self.z
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn leaf_count(&self) -> u64 {
        1 << self.levels
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn payload_size(&self) -> usize {
        self.payload_size
    }

    /// Slots read (and written) by one access.
    pub fn path_slots(&self) -> usize {
        (self.levels as usize + 1) * self.z
    }

    pub fn stash_len(&self) -> usize {
        self.stash.len()
    }

    pub fn max_stash(&self) -> usize {
        self.max_stash
    }

    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    /// Leaf whose path the most recent access read.
    pub fn last_leaf(&self) -> u64 {
        self.last_leaf
    }

    fn bucket(&self, leaf: u64, depth: u32) -> usize {
        ((1usize << depth) - 1) + (leaf >> (self.levels - depth)) as usize
    }

    /// Deepest level at which the paths to leaves `a` and `b` share a bucket.
    fn common_depth(&self, a: u64, b: u64) -> u32 {
        let diff = a ^ b;
        self.levels - (64 - diff.leading_zeros())
    }

    fn check(&self, id: u64) -> Result<()> {
        if id >= self.n {
            return Err(Error::UnknownBlock { id, capacity: self.n });
        }
        Ok(())
    }

    /// Place a block without any trace events, as a trusted bulk load.
    pub fn preload(&mut self, id: u64, payload: &[u8]) -> Result<()> {
        self.check(id)?;
        if payload.len() != self.payload_size {
            return Err(Error::PayloadSizeMismatch {
                expected: self.payload_size,
                found: payload.len(),
            });
        }
        let leaf = self.position[id as usize];
        for depth in (0..=self.levels).rev() {
            let b = self.bucket(leaf, depth);
            for s in b * self.z..(b + 1) * self.z {
                if let Some(e) = &mut self.slots[s] {
                    if e.id == id {
                        e.payload.copy_from_slice(payload);
                        return Ok(());
                    }
                }
            }
        }
        if let Some(e) = self.stash.iter_mut().find(|e| e.id == id) {
            e.payload.copy_from_slice(payload);
            return Ok(());
        }
        for depth in (0..=self.levels).rev() {
            let b = self.bucket(leaf, depth);
            if let Some(s) = (b * self.z..(b + 1) * self.z).find(|&s| self.slots[s].is_none()) {
                self.slots[s] = Some(Entry {
                    id,
                    payload: payload.into(),
                });
                return Ok(());
            }
        }
        self.stash.push(Entry {
            id,
            payload: payload.into(),
        });
        self.max_stash = self.max_stash.max(self.stash.len());
        Ok(())
    }

    /// Read block `id`, or replace it with `data`. Returns the payload held
    /// before the access; never-written blocks read as zeros.
    pub fn access(&mut self, op: OramOp, id: u64, data: Option<&[u8]>) -> Result<Vec<u8>> {
        self.check(id)?;
        let new = match (op, data) {
            (OramOp::Write, Some(d)) if d.len() == self.payload_size => Some(d),
            (OramOp::Write, Some(d)) => {
                return Err(Error::PayloadSizeMismatch {
                    expected: self.payload_size,
                    found: d.len(),
                })
            }
            (OramOp::Write, None) => {
                return Err(Error::PayloadSizeMismatch {
                    expected: self.payload_size,
                    found: 0,
                })
            }
            (OramOp::Read, _) => None,
        };
        self.accesses += 1;
        let leaf = self.position[id as usize];
        self.last_leaf = leaf;
        self.position[id as usize] = self.rng.gen_range(0..self.leaf_count());

        for depth in 0..=self.levels {
            let b = self.bucket(leaf, depth);
            for s in b * self.z..(b + 1) * self.z {
                trace::emit(
                    Region::Untrusted,
                    Granularity::Block,
                    AccessOp::Read,
                    self.file_id,
                    s as u64,
                    None,
                );
                if let Some(e) = self.slots[s].take() {
                    self.stash.push(e);
                }
            }
        }

        // Scan every stash entry; the target is picked out with masked copies.
        let mut out = vec![0u8; self.payload_size];
        let mut found = 0u64;
        for e in self.stash.iter_mut() {
            let hit = e.id == id;
            ct_assign(hit, &mut out, &e.payload);
            if let Some(d) = new {
                ct_assign(hit, &mut e.payload, d);
            }
            found = ct_select_u64(hit, 1, found);
        }
        if found == 0 {
            let payload: Box<[u8]> = match new {
                Some(d) => d.into(),
                None => vec![0u8; self.payload_size].into(),
            };
            self.stash.push(Entry { id, payload });
        }

        self.evict(leaf);
        self.max_stash = self.max_stash.max(self.stash.len());
        if self.stash.len() > self.stash_capacity {
            return Err(Error::StashOverflow {
                occupancy: self.stash.len(),
                capacity: self.stash_capacity,
            });
        }
        Ok(out)
    }

    fn evict(&mut self, leaf: u64) {
        let levels = self.levels as usize;
        let mut fill: Vec<Vec<Entry>> = (0..=levels).map(|_| Vec::with_capacity(self.z)).collect();
        let mut keep = Vec::with_capacity(self.stash.len());
        for e in std::mem::take(&mut self.stash) {
            let deepest = self.common_depth(self.position[e.id as usize], leaf) as usize;
            match (0..=deepest).rev().find(|&d| fill[d].len() < self.z) {
                Some(d) => fill[d].push(e),
                None => keep.push(e),
            }
        }
        self.stash = keep;
        for (depth, entries) in fill.into_iter().enumerate() {
            let b = self.bucket(leaf, depth as u32);
            let mut entries = entries.into_iter();
            for s in b * self.z..(b + 1) * self.z {
                self.slots[s] = entries.next();
                trace::emit(
                    Region::Untrusted,
                    Granularity::Block,
                    AccessOp::Write,
                    self.file_id,
                    s as u64,
                    None,
                );
            }
        }
    }

    /// Every real block sits on the path to its leaf or in the stash.
    pub fn check_invariant(&self) -> bool {
        self.slots.iter().enumerate().all(|(s, e)| match e {
            None => true,
            Some(e) => {
                let b = s / self.z;
                let depth = (b + 1).ilog2();
                self.bucket(self.position[e.id as usize], depth) == b
            }
        })
    }
}

pub fn oram_access(state: &mut OramState, op: OramOp, id: u64, data: Option<&[u8]>) -> Result<Vec<u8>> {
    state.access(op, id, data)
}

/// Read blocks `0..n` in order.
pub fn oram_scan(state: &mut OramState, n: u64) -> Result<()> {
    if n > state.block_count() {
        return Err(Error::UnknownBlock {
            id: n - 1,
            capacity: state.block_count(),
        });
    }
    for id in 0..n {
        state.access(OramOp::Read, id, None)?;
    }
    Ok(())
}
