//! Simulated trusted region.
//!
//! The [`Enclave`] holds the sealing key, seals and unseals blocks, and owns a
//! small least-recently-used block buffer standing in for enclave memory.
//! Blocks are sealed with AES-128-GCM; the cleartext header (file id, block
//! id, nonce) is bound in as associated data, so a block cannot be altered,
//! moved within its file, or spliced into another file without detection.

use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce, Tag};

use crate::block_store::{BlockFileMeta, BlockHeader, FileId, SealedBlock, UntrustedStore, NONCE_LEN};
use crate::error::{Error, IntegrityError, Result};
use crate::record::{is_dummy, write_dummy};
use crate::trace::{self, AccessOp, Granularity, Region};

/// 128-bit sealing key. Never written to untrusted storage; `Debug` is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct SealKey([u8; 16]);

impl SealKey {
    pub fn new(bytes: [u8; 16]) -> Self {
        SealKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let v = hex::decode(s.trim()).map_err(|e| Error::Config(format!("key_hex: {e}")))?;
        let bytes: [u8; 16] = v
            .try_into()
            .map_err(|_| Error::Config("key_hex must be 32 hex digits".into()))?;
        Ok(SealKey(bytes))
    }

    pub fn random() -> Self {
        SealKey(rand::random())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for SealKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SealKey(..)")
    }
}

/// Decrypted block: exactly `records_per_block` fixed-size records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainBlock {
    pub file_id: u64,
    pub block_id: u64,
    record_size: usize,
    data: Vec<u8>,
}

impl PlainBlock {
    /// A block whose every record is a dummy.
    pub fn dummy(file_id: u64, block_id: u64, meta: &BlockFileMeta) -> Self {
        let mut data = vec![0u8; meta.payload_size()];
        for rec in data.chunks_exact_mut(meta.record_size) {
            write_dummy(rec);
        }
        PlainBlock {
            file_id,
            block_id,
            record_size: meta.record_size,
            data,
        }
    }

    pub fn from_records(file_id: u64, block_id: u64, record_size: usize, data: Vec<u8>) -> Result<Self> {
        if data.is_empty() || data.len() % record_size != 0 {
            return Err(Error::SizeMismatch {
                expected: record_size,
                found: data.len(),
            });
        }
        Ok(PlainBlock {
            file_id,
            block_id,
            record_size,
            data,
        })
    }

    pub fn record_size(&self) -> usize {
        self.record_size
    }

    pub fn records_per_block(&self) -> usize {
        self.data.len() / self.record_size
    }

    pub fn record(&self, i: usize) -> &[u8] {
        &self.data[i * self.record_size..(i + 1) * self.record_size]
    }

    pub fn record_mut(&mut self, i: usize) -> &mut [u8] {
        &mut self.data[i * self.record_size..(i + 1) * self.record_size]
    }

    pub fn records(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.record_size)
    }

    pub fn real_records(&self) -> impl Iterator<Item = &[u8]> {
        self.records().filter(|r| !is_dummy(r))
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

/// Report an enclave-side access to one record of `block`. Every record
/// access the engine performs goes through here or through
/// [`crate::oblivious::RecordSlots`], which emits the same events.
pub fn touch_record(block: &PlainBlock, record_index: usize, op: AccessOp) -> Result<()> {
    let len = block.records_per_block();
    if record_index >= len {
        return Err(Error::RecordOutOfRange {
            index: record_index,
            len,
        });
    }
    trace::emit(
        Region::Enclave,
        Granularity::Record,
        op,
        block.file_id,
        block.block_id,
        Some(record_index as u32),
    );
    Ok(())
}

/// Buffer slot handle returned by [`Enclave::load`] and [`Enclave::insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot(usize);

struct Resident {
    block: PlainBlock,
    last_used: u64,
}

/// Bounded set of resident plaintext blocks with least-recently-used eviction.
pub struct EnclaveBuffer {
    capacity: usize,
    slots: Vec<Option<Resident>>,
    clock: u64,
    evictions: u64,
}

impl EnclaveBuffer {
    pub const MIN_CAPACITY: usize = 2;

    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < Self::MIN_CAPACITY {
            return Err(Error::BufferCapacity(capacity));
        }
        Ok(EnclaveBuffer {
            capacity,
            slots: (0..capacity).map(|_| None).collect(),
            clock: 0,
            evictions: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resident(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    fn find(&self, file: FileId, index: u64) -> Option<usize> {
        self.slots.iter().position(|s| {
            s.as_ref()
                .is_some_and(|r| r.block.file_id == file.0 && r.block.block_id == index)
        })
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }
}

/// The trusted side: key, nonce counter and block buffer.
pub struct Enclave {
    cipher: Aes128Gcm,
    nonce_salt: [u8; 4],
    nonce_counter: u64,
    buffer: EnclaveBuffer,
}

impl Enclave {
    pub fn new(key: &SealKey, buffer_capacity: usize) -> Result<Self> {
        Ok(Enclave {
            cipher: Aes128Gcm::new(&key.0.into()),
            nonce_salt: rand::random(),
            nonce_counter: 0,
            buffer: EnclaveBuffer::new(buffer_capacity)?,
        })
    }

    pub fn buffer(&self) -> &EnclaveBuffer {
        &self.buffer
    }

    /// Number of sealing operations so far; each one consumed a fresh nonce.
    pub fn nonces_issued(&self) -> u64 {
        self.nonce_counter
    }

    fn next_nonce(&mut self) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[..4].copy_from_slice(&self.nonce_salt);
        n[4..].copy_from_slice(&self.nonce_counter.to_le_bytes());
        self.nonce_counter = self.nonce_counter.checked_add(1).expect("nonce space exhausted");
        n
    }

    pub fn seal_block(&mut self, plain: &PlainBlock) -> SealedBlock {
        let header = BlockHeader {
            file_id: plain.file_id,
            block_id: plain.block_id,
            nonce: self.next_nonce(),
        };
        let mut ciphertext = plain.data.clone();
        let tag = self
            .cipher
            .encrypt_in_place_detached(
                Nonce::from_slice(&header.nonce),
                &header.to_bytes(),
                &mut ciphertext,
            )
            .expect("payload within AES-GCM limits");
        SealedBlock {
            header,
            ciphertext,
            auth_tag: tag.into(),
        }
    }

    /// Verify and decrypt a block read from untrusted storage.
    ///
    /// The tag is checked first; only an authentic block is then checked
    /// against the position the caller asked for.
    pub fn unseal_block(
        &self,
        sealed: &SealedBlock,
        expected_file: FileId,
        expected_block: u64,
        record_size: usize,
    ) -> Result<PlainBlock, IntegrityError> {
        let mut data = sealed.ciphertext.clone();
        self.cipher
            .decrypt_in_place_detached(
                Nonce::from_slice(&sealed.header.nonce),
                &sealed.header.to_bytes(),
                &mut data,
                Tag::from_slice(&sealed.auth_tag),
            )
            .map_err(|_| IntegrityError::TagMismatch)?;
        if sealed.header.file_id != expected_file.0 {
            return Err(IntegrityError::FileIdMismatch {
                expected: expected_file.0,
                found: sealed.header.file_id,
            });
        }
        if sealed.header.block_id != expected_block {
            return Err(IntegrityError::BlockIdMismatch {
                expected: expected_block,
                found: sealed.header.block_id,
            });
        }
        if record_size == 0 || data.len() % record_size != 0 {
            return Err(IntegrityError::TagMismatch);
        }
        Ok(PlainBlock {
            file_id: expected_file.0,
            block_id: expected_block,
            record_size,
            data,
        })
    }

    /// Read, verify and decrypt one block without going through the buffer.
    pub fn fetch(&mut self, store: &mut UntrustedStore, file: FileId, index: u64) -> Result<PlainBlock> {
        let meta = store.meta(file)?;
        let sealed = store.read_block(file, index)?;
        Ok(self.unseal_block(&sealed, file, index, meta.record_size)?)
    }

    /// Seal `plain` and store it at its own `(file_id, block_id)`.
    pub fn store(&mut self, store: &mut UntrustedStore, plain: &PlainBlock) -> Result<()> {
        let sealed = self.seal_block(plain);
        store.write_block(FileId(plain.file_id), plain.block_id, &sealed)
    }

    /// Make block `index` of `file` resident and return its slot.
    ///
    /// A hit costs no untrusted read. A miss on a full buffer first seals and
    /// writes back the least-recently-used resident block.
    pub fn load(&mut self, store: &mut UntrustedStore, file: FileId, index: u64) -> Result<Slot> {
        trace::emit(
            Region::Enclave,
            Granularity::Block,
            AccessOp::Read,
            file.0,
            index,
            None,
        );
        let now = self.buffer.tick();
        if let Some(i) = self.buffer.find(file, index) {
            self.buffer.slots[i].as_mut().unwrap().last_used = now;
            return Ok(Slot(i));
        }
        let block = self.fetch(store, file, index)?;
        self.place(store, block, now)
    }

    /// Make a block created inside the enclave resident.
    pub fn insert(&mut self, store: &mut UntrustedStore, block: PlainBlock) -> Result<Slot> {
        let now = self.buffer.tick();
        if let Some(i) = self.buffer.find(FileId(block.file_id), block.block_id) {
            self.buffer.slots[i] = Some(Resident {
                block,
                last_used: now,
            });
            return Ok(Slot(i));
        }
        self.place(store, block, now)
    }

    fn place(&mut self, store: &mut UntrustedStore, block: PlainBlock, now: u64) -> Result<Slot> {
        let free = match self.buffer.slots.iter().position(Option::is_none) {
            Some(i) => i,
            None => {
                let victim = self
                    .buffer
                    .slots
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, s)| s.as_ref().map_or(0, |r| r.last_used))
                    .map(|(i, _)| i)
                    .ok_or(Error::BufferExhausted)?;
                let evicted = self.buffer.slots[victim].take().unwrap();
                self.buffer.evictions += 1;
                self.store(store, &evicted.block)?;
                victim
            }
        };
        self.buffer.slots[free] = Some(Resident {
            block,
            last_used: now,
        });
        debug_assert!(self.buffer.resident() <= self.buffer.capacity);
        Ok(Slot(free))
    }

    pub fn block(&self, slot: Slot) -> &PlainBlock {
        &self.buffer.slots[slot.0].as_ref().expect("stale slot").block
    }

    pub fn block_mut(&mut self, slot: Slot) -> &mut PlainBlock {
        &mut self.buffer.slots[slot.0].as_mut().expect("stale slot").block
    }

    /// Two distinct resident blocks, mutably.
    pub fn pair_mut(&mut self, a: Slot, b: Slot) -> (&mut PlainBlock, &mut PlainBlock) {
        assert_ne!(a.0, b.0, "pair_mut on one slot");
        let (lo, hi, flip) = if a.0 < b.0 {
            (a.0, b.0, false)
        } else {
            (b.0, a.0, true)
        };
        let (left, right) = self.buffer.slots.split_at_mut(hi);
        let x = &mut left[lo].as_mut().expect("stale slot").block;
        let y = &mut right[0].as_mut().expect("stale slot").block;
        if flip {
            (y, x)
        } else {
            (x, y)
        }
    }

    /// Seal the resident block, write it to its own position, and drop it.
    pub fn flush(&mut self, store: &mut UntrustedStore, slot: Slot) -> Result<()> {
        let r = self.buffer.slots[slot.0].take().expect("stale slot");
        self.store(store, &r.block)
    }

    /// Drop a resident block without writing it back.
    pub fn release(&mut self, slot: Slot) -> PlainBlock {
        self.buffer.slots[slot.0].take().expect("stale slot").block
    }

    /// Give a resident block a new identity; the next flush writes it there.
    pub fn retarget(&mut self, slot: Slot, file: FileId, index: u64) {
        let b = self.block_mut(slot);
        b.file_id = file.0;
        b.block_id = index;
    }

    /// Write back every resident block, oldest first.
    pub fn flush_all(&mut self, store: &mut UntrustedStore) -> Result<()> {
        let mut order: Vec<(u64, usize)> = self
            .buffer
            .slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|r| (r.last_used, i)))
            .collect();
        order.sort_unstable();
        for (_, i) in order {
            self.flush(store, Slot(i))?;
        }
        Ok(())
    }
}
