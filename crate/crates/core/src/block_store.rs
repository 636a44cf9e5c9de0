//! Untrusted block storage.
//!
//! This is the only code that touches persistent bytes. It moves sealed
//! blocks in and out by index and never sees plaintext. Every transfer is
//! reported to the trace recorder as an untrusted-region block access.
//!
//! # On-disk layout
//!
//! All integers are little-endian.
//!
//! ```text
//! superblock (38 bytes):
//!   magic "SGMR" | version u16 | record_size u32 | records_per_block u32
//!   | block_count u64 | reserved [u8; 16]
//! block (payload_size + 44 bytes), repeated block_count times:
//!   file_id u64 | block_id u64 | nonce [u8; 12] | ciphertext | auth_tag [u8; 16]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{Cursor, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::record::KEY_LEN;
use crate::trace::{self, AccessOp, Granularity, Region};

pub const MAGIC: &[u8; 4] = b"SGMR";
pub const FORMAT_VERSION: u16 = 1;
pub const SUPERBLOCK_LEN: usize = 4 + 2 + 4 + 4 + 8 + 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const HEADER_LEN: usize = 8 + 8 + NONCE_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(pub u64);

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Cleartext block identity. Authenticated (as associated data) but not encrypted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub file_id: u64,
    pub block_id: u64,
    pub nonce: [u8; NONCE_LEN],
}

impl BlockHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&self.file_id.to_le_bytes());
        out[8..16].copy_from_slice(&self.block_id.to_le_bytes());
        out[16..].copy_from_slice(&self.nonce);
        out
    }

    pub fn from_bytes(b: &[u8; HEADER_LEN]) -> Self {
        BlockHeader {
            file_id: u64::from_le_bytes(b[..8].try_into().unwrap()),
            block_id: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            nonce: b[16..].try_into().unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlock {
    pub header: BlockHeader,
    pub ciphertext: Vec<u8>,
    pub auth_tag: [u8; TAG_LEN],
}

impl SealedBlock {
    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + self.ciphertext.len() + TAG_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.auth_tag);
        out
    }

    pub fn from_bytes(bytes: &[u8], payload_size: usize) -> Result<Self> {
        if bytes.len() != HEADER_LEN + payload_size + TAG_LEN {
            return Err(Error::SizeMismatch {
                expected: HEADER_LEN + payload_size + TAG_LEN,
                found: bytes.len(),
            });
        }
        let header = BlockHeader::from_bytes(bytes[..HEADER_LEN].try_into().unwrap());
        let ct_end = HEADER_LEN + payload_size;
        Ok(SealedBlock {
            header,
            ciphertext: bytes[HEADER_LEN..ct_end].to_vec(),
            auth_tag: bytes[ct_end..].try_into().unwrap(),
        })
    }
}

/// Record geometry of a block file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFileMeta {
    pub record_size: usize,
    pub records_per_block: usize,
    pub block_count: u64,
}

impl BlockFileMeta {
    pub fn new(record_size: usize, records_per_block: usize) -> Result<Self> {
        let meta = BlockFileMeta {
            record_size,
            records_per_block,
            block_count: 0,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Fit records of at least `min_record_size` bytes into a `block_size`
    /// payload. The record size is rounded up to `block_size / records_per_block`
    /// so no whole record's worth of space is left unused.
    pub fn for_block_size(block_size: usize, min_record_size: usize) -> Result<Self> {
        if min_record_size == 0 || min_record_size > block_size {
            return Err(Error::InvalidMeta(format!(
                "record size {min_record_size} does not fit block size {block_size}"
            )));
        }
        let per_block = block_size / min_record_size;
        Self::new(block_size / per_block, per_block)
    }

    /// Split a `block_size` payload into exactly `records_per_block` records.
    pub fn with_records_per_block(block_size: usize, records_per_block: usize) -> Result<Self> {
        if records_per_block == 0 {
            return Err(Error::InvalidMeta("records_per_block must be at least 1".into()));
        }
        Self::new(block_size / records_per_block, records_per_block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records_per_block == 0 {
            return Err(Error::InvalidMeta("records_per_block must be at least 1".into()));
        }
        if self.record_size < KEY_LEN + 1 {
            return Err(Error::InvalidMeta(format!(
                "record size {} must exceed the {KEY_LEN}-byte key",
                self.record_size
            )));
        }
        if self.record_size > u32::MAX as usize || self.records_per_block > u32::MAX as usize {
            return Err(Error::InvalidMeta("record geometry exceeds u32".into()));
        }
        Ok(())
    }

    pub fn payload_size(&self) -> usize {
        self.record_size * self.records_per_block
    }

    pub fn sealed_block_len(&self) -> usize {
        HEADER_LEN + self.payload_size() + TAG_LEN
    }

    fn superblock(&self) -> [u8; SUPERBLOCK_LEN] {
        let mut sb = [0u8; SUPERBLOCK_LEN];
        sb[..4].copy_from_slice(MAGIC);
        sb[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        sb[6..10].copy_from_slice(&(self.record_size as u32).to_le_bytes());
        sb[10..14].copy_from_slice(&(self.records_per_block as u32).to_le_bytes());
        sb[14..22].copy_from_slice(&self.block_count.to_le_bytes());
        sb
    }

    fn from_superblock(sb: &[u8; SUPERBLOCK_LEN]) -> Result<Self> {
        if &sb[..4] != MAGIC {
            return Err(Error::BadFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes(sb[4..6].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::BadFormat(format!("unsupported version {version}")));
        }
        let meta = BlockFileMeta {
            record_size: u32::from_le_bytes(sb[6..10].try_into().unwrap()) as usize,
            records_per_block: u32::from_le_bytes(sb[10..14].try_into().unwrap()) as usize,
            block_count: u64::from_le_bytes(sb[14..22].try_into().unwrap()),
        };
        meta.validate()?;
        Ok(meta)
    }
}

/// Where a block file lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Memory,
    Path(PathBuf),
}

trait Backend: Read + Write + Seek + Send {}
impl<T: Read + Write + Seek + Send> Backend for T {}

struct BlockFile {
    meta: BlockFileMeta,
    backend: Box<dyn Backend>,
}

impl BlockFile {
    fn offset(&self, index: u64) -> u64 {
        SUPERBLOCK_LEN as u64 + index * self.meta.sealed_block_len() as u64
    }

    fn sync_count(&mut self) -> Result<()> {
        self.backend.seek(SeekFrom::Start(14))?;
        self.backend.write_all(&self.meta.block_count.to_le_bytes())?;
        Ok(())
    }
}

/// The untrusted region's collection of block files, addressed by [`FileId`].
pub struct UntrustedStore {
    files: BTreeMap<FileId, BlockFile>,
    next_id: u64,
}

impl Default for UntrustedStore {
    fn default() -> Self {
        Self::new()
    }
}

impl UntrustedStore {
    pub fn new() -> Self {
        UntrustedStore {
            files: BTreeMap::new(),
            next_id: 1,
        }
    }

    /// Reserve an unused id. Ids are handed out in increasing order, so a
    /// fixed sequence of operations always produces the same ids.
    pub fn fresh_id(&mut self) -> FileId {
        while self.files.contains_key(&FileId(self.next_id)) {
            self.next_id += 1;
        }
        let id = FileId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Create an empty file under a freshly allocated id.
    pub fn create_file(&mut self, meta: BlockFileMeta, location: Location) -> Result<FileId> {
        let id = self.fresh_id();
        self.create_file_with_id(id, meta, location)?;
        Ok(id)
    }

    pub fn create_file_with_id(&mut self, id: FileId, meta: BlockFileMeta, location: Location) -> Result<()> {
        meta.validate()?;
        if self.files.contains_key(&id) {
            return Err(Error::DuplicateFile(id));
        }
        let meta = BlockFileMeta {
            block_count: 0,
            ..meta
        };
        let mut backend: Box<dyn Backend> = match location {
            Location::Memory => Box::new(Cursor::new(Vec::new())),
            Location::Path(p) => Box::new(
                OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create(true)
                    .truncate(true)
                    .open(p)?,
            ),
        };
        backend.write_all(&meta.superblock())?;
        self.register(id, BlockFile { meta, backend });
        Ok(())
    }

    fn register(&mut self, id: FileId, file: BlockFile) {
        self.files.insert(id, file);
        self.next_id = self.next_id.max(id.0.saturating_add(1));
    }

    /// Open an existing block file. Its id is the one declared in block 0's
    /// header; an empty file gets a fresh id.
    pub fn open_file(&mut self, path: &Path) -> Result<FileId> {
        let backend = OpenOptions::new().read(true).write(true).open(path)?;
        self.adopt(Box::new(backend))
    }

    /// Register a file image held in memory, e.g. one produced by [`UntrustedStore::export`].
    pub fn import(&mut self, image: Vec<u8>) -> Result<FileId> {
        self.adopt(Box::new(Cursor::new(image)))
    }

    fn adopt(&mut self, mut backend: Box<dyn Backend>) -> Result<FileId> {
        let mut sb = [0u8; SUPERBLOCK_LEN];
        backend.seek(SeekFrom::Start(0))?;
        backend
            .read_exact(&mut sb)
            .map_err(|_| Error::BadFormat("truncated superblock".into()))?;
        let meta = BlockFileMeta::from_superblock(&sb)?;
        let id = if meta.block_count > 0 {
            let mut id = [0u8; 8];
            backend.read_exact(&mut id)?;
            FileId(u64::from_le_bytes(id))
        } else {
            self.fresh_id()
        };
        if self.files.contains_key(&id) {
            return Err(Error::DuplicateFile(id));
        }
        self.register(id, BlockFile { meta, backend });
        Ok(id)
    }

    /// The raw bytes of a file, superblock included.
    pub fn export(&mut self, id: FileId) -> Result<Vec<u8>> {
        let f = self.file_mut(id)?;
        let len = f.offset(f.meta.block_count);
        let mut out = vec![0u8; len as usize];
        f.backend.seek(SeekFrom::Start(0))?;
        f.backend.read_exact(&mut out)?;
        Ok(out)
    }

    /// Copy a file to disk in the standard layout.
    pub fn save(&mut self, id: FileId, path: &Path) -> Result<()> {
        let bytes = self.export(id)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    fn file(&self, id: FileId) -> Result<&BlockFile> {
        self.files.get(&id).ok_or(Error::UnknownFile(id))
    }

    fn file_mut(&mut self, id: FileId) -> Result<&mut BlockFile> {
        self.files.get_mut(&id).ok_or(Error::UnknownFile(id))
    }

    pub fn contains(&self, id: FileId) -> bool {
        self.files.contains_key(&id)
    }

    pub fn meta(&self, id: FileId) -> Result<BlockFileMeta> {
        Ok(self.file(id)?.meta)
    }

    pub fn block_count(&self, id: FileId) -> Result<u64> {
        Ok(self.file(id)?.meta.block_count)
    }

    pub fn read_block(&mut self, id: FileId, index: u64) -> Result<SealedBlock> {
        let block = self.read_raw(id, index)?;
        trace::emit(
            Region::Untrusted,
            Granularity::Block,
            AccessOp::Read,
            id.0,
            index,
            None,
        );
        Ok(block)
    }

    fn read_raw(&mut self, id: FileId, index: u64) -> Result<SealedBlock> {
        let f = self.file_mut(id)?;
        let count = f.meta.block_count;
        if index >= count {
            return Err(Error::IndexOutOfRange { index, count });
        }
        let mut buf = vec![0u8; f.meta.sealed_block_len()];
        let off = f.offset(index);
        f.backend.seek(SeekFrom::Start(off))?;
        f.backend.read_exact(&mut buf)?;
        SealedBlock::from_bytes(&buf, f.meta.payload_size())
    }

    /// Store `block` at `index`; `index == block_count` appends.
    pub fn write_block(&mut self, id: FileId, index: u64, block: &SealedBlock) -> Result<()> {
        let f = self.file_mut(id)?;
        let count = f.meta.block_count;
        if index > count {
            return Err(Error::IndexGap { index, count });
        }
        if block.ciphertext.len() != f.meta.payload_size() {
            return Err(Error::SizeMismatch {
                expected: f.meta.payload_size(),
                found: block.ciphertext.len(),
            });
        }
        let off = f.offset(index);
        f.backend.seek(SeekFrom::Start(off))?;
        f.backend.write_all(&block.to_bytes())?;
        if index == count {
            f.meta.block_count += 1;
            f.sync_count()?;
        }
        trace::emit(
            Region::Untrusted,
            Granularity::Block,
            AccessOp::Write,
            id.0,
            index,
            None,
        );
        Ok(())
    }

    /// Drop trailing blocks so the file holds `block_count` blocks.
    pub fn truncate(&mut self, id: FileId, block_count: u64) -> Result<()> {
        let f = self.file_mut(id)?;
        if block_count > f.meta.block_count {
            return Err(Error::IndexOutOfRange {
                index: block_count,
                count: f.meta.block_count,
            });
        }
        f.meta.block_count = block_count;
        f.sync_count()
    }

    pub fn remove(&mut self, id: FileId) -> Result<()> {
        self.files.remove(&id).map(|_| ()).ok_or(Error::UnknownFile(id))
    }

    pub fn file_ids(&self) -> impl Iterator<Item = FileId> + '_ {
        self.files.keys().copied()
    }

    /// Overwrite raw bytes of a stored block. Stands in for a malicious host.
    pub fn tamper(&mut self, id: FileId, index: u64, f: impl FnOnce(&mut SealedBlock)) -> Result<()> {
        let mut block = self.read_raw(id, index)?;
        f(&mut block);
        let file = self.file_mut(id)?;
        let off = file.offset(index);
        file.backend.seek(SeekFrom::Start(off))?;
        file.backend.write_all(&block.to_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{capture, trace_stats};

    fn block(file: u64, id: u64, payload: usize, fill: u8) -> SealedBlock {
        SealedBlock {
            header: BlockHeader {
                file_id: file,
                block_id: id,
                nonce: [fill; NONCE_LEN],
            },
            ciphertext: vec![fill; payload],
            auth_tag: [fill; TAG_LEN],
        }
    }

    #[test]
    fn meta_arithmetic() {
        let m = BlockFileMeta::new(64, 32).unwrap();
        assert_eq!(m.payload_size(), 2048);
        assert!(matches!(BlockFileMeta::new(64, 0), Err(Error::InvalidMeta(_))));
        assert!(matches!(
            BlockFileMeta::new(KEY_LEN, 4),
            Err(Error::InvalidMeta(_))
        ));
        let m = BlockFileMeta::for_block_size(2048, 60).unwrap();
        assert_eq!((m.record_size, m.records_per_block), (60, 34));
        let m = BlockFileMeta::for_block_size(2048, 64).unwrap();
        assert_eq!(
            (m.record_size, m.records_per_block, m.payload_size()),
            (64, 32, 2048)
        );
    }

    #[test]
    fn thirty_records_per_two_kib_block() {
        let m = BlockFileMeta::with_records_per_block(2048, 30).unwrap();
        assert_eq!(m.record_size, 68);
        assert_eq!(m.records_per_block, 30);
        assert_eq!(m.payload_size(), 2040);
    }

    #[test]
    fn create_write_read_round_trip() {
        let mut s = UntrustedStore::new();
        let meta = BlockFileMeta::new(32, 4).unwrap();
        let f = s.create_file(meta, Location::Memory).unwrap();
        assert_eq!(s.block_count(f).unwrap(), 0);
        let b = block(f.0, 0, 128, 7);
        s.write_block(f, 0, &b).unwrap();
        assert_eq!(s.read_block(f, 0).unwrap(), b);
        assert!(matches!(
            s.read_block(f, 1),
            Err(Error::IndexOutOfRange { index: 1, count: 1 })
        ));
        assert!(matches!(s.write_block(f, 2, &b), Err(Error::IndexGap { .. })));
        assert!(matches!(
            s.write_block(f, 1, &block(f.0, 1, 127, 0)),
            Err(Error::SizeMismatch {
                expected: 128,
                found: 127
            })
        ));
    }

    #[test]
    fn overwrite_emits_single_write() {
        let mut s = UntrustedStore::new();
        let f = s
            .create_file(BlockFileMeta::new(32, 2).unwrap(), Location::Memory)
            .unwrap();
        s.write_block(f, 0, &block(f.0, 0, 64, 1)).unwrap();
        let (r, t) = capture(|| s.write_block(f, 0, &block(f.0, 0, 64, 2))).unwrap();
        r.unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.events[0].op, AccessOp::Write);
        assert_eq!(s.block_count(f).unwrap(), 1);
        assert_eq!(s.read_block(f, 0).unwrap().ciphertext[0], 2);
    }

    #[test]
    fn sequential_scan_trace_depends_only_on_count() {
        let n = 21_000u64;
        let mut s = UntrustedStore::new();
        let f = s
            .create_file(BlockFileMeta::new(17, 1).unwrap(), Location::Memory)
            .unwrap();
        for i in 0..n {
            s.write_block(f, i, &block(f.0, i, 17, (i % 251) as u8)).unwrap();
        }
        let (_, t) = capture(|| {
            for i in 0..n {
                s.read_block(f, i).unwrap();
            }
        })
        .unwrap();
        assert_eq!(trace_stats(&t).untrusted_block_reads(), n);
        assert!(t.events.iter().enumerate().all(|(i, e)| e.block_id == i as u64));
    }

    #[test]
    fn disk_file_layout_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sgmr");
        let mut s = UntrustedStore::new();
        let meta = BlockFileMeta::new(20, 3).unwrap();
        s.create_file_with_id(FileId(42), meta, Location::Path(path.clone()))
            .unwrap();
        for i in 0..3 {
            s.write_block(FileId(42), i, &block(42, i, 60, i as u8)).unwrap();
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SGMR");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 20);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 3);
        assert!(bytes[22..38].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), SUPERBLOCK_LEN + 3 * (60 + HEADER_LEN + TAG_LEN));
        // every block serializes to the same length
        assert_eq!(u64::from_le_bytes(bytes[38..46].try_into().unwrap()), 42);

        let mut s2 = UntrustedStore::new();
        let id = s2.open_file(&path).unwrap();
        assert_eq!(id, FileId(42));
        assert_eq!(s2.meta(id).unwrap().block_count, 3);
        assert_eq!(s2.read_block(id, 2).unwrap(), block(42, 2, 60, 2));
        assert_eq!(s2.fresh_id(), FileId(43));
    }

    #[test]
    fn rejects_foreign_bytes() {
        let mut s = UntrustedStore::new();
        assert!(matches!(s.import(b"NOPE".to_vec()), Err(Error::BadFormat(_))));
        let mut img = vec![0u8; SUPERBLOCK_LEN];
        img[..4].copy_from_slice(MAGIC);
        img[4] = 9;
        assert!(matches!(s.import(img), Err(Error::BadFormat(_))));
    }

    #[test]
    fn export_import_round_trip() {
        let mut s = UntrustedStore::new();
        let f = s
            .create_file(BlockFileMeta::new(24, 2).unwrap(), Location::Memory)
            .unwrap();
        s.write_block(f, 0, &block(f.0, 0, 48, 3)).unwrap();
        let img = s.export(f).unwrap();
        let mut s2 = UntrustedStore::new();
        let g = s2.import(img).unwrap();
        assert_eq!(g, f);
        assert_eq!(s2.read_block(g, 0).unwrap(), block(f.0, 0, 48, 3));
    }
}
