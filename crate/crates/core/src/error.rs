//! Error types shared by every layer of the engine.

use std::io;

use thiserror::Error;

use crate::block_store::FileId;

/// Failure to verify a block fetched from untrusted storage.
///
/// Each variant corresponds to one tampering strategy available to the
/// untrusted host: altering bytes, replaying a block of the same file at the
/// wrong position, or splicing in a block from another file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum IntegrityError {
    /// The authentication tag does not cover the presented header and ciphertext.
    #[error("authentication tag mismatch")]
    TagMismatch,
    /// The block authenticates, but was sealed for a different position.
    #[error("block id mismatch: expected {expected}, found {found}")]
    BlockIdMismatch { expected: u64, found: u64 },
    /// The block authenticates, but was sealed for a different file.
    #[error("file id mismatch: expected {expected}, found {found}")]
    FileIdMismatch { expected: u64, found: u64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
    #[error("invalid block file metadata: {0}")]
    InvalidMeta(String),
    #[error("not a block file: {0}")]
    BadFormat(String),
    #[error("unknown file {0}")]
    UnknownFile(FileId),
    #[error("file {0} already registered")]
    DuplicateFile(FileId),
    #[error("block index {index} out of range (block count {count})")]
    IndexOutOfRange { index: u64, count: u64 },
    #[error("write at index {index} would leave a gap (block count {count})")]
    IndexGap { index: u64, count: u64 },
    #[error("sealed payload is {found} bytes, file expects {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("record index {index} out of range ({len} records)")]
    RecordOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("enclave buffer capacity {0} is too small")]
    BufferCapacity(usize),
    #[error("enclave buffer is full of pinned blocks")]
    BufferExhausted,
    #[error("a trace capture is already active on this thread")]
    NestedCapture,
    #[error("inputs do not share one shape: {0}")]
    ShapeMismatch(String),
    #[error("reduce input is not sorted by key")]
    UnsortedInput,
    #[error("map output overflow: {0}")]
    MapOverflow(String),
    #[error("ORAM stash overflow: {occupancy} blocks exceeds capacity {capacity}")]
    StashOverflow { occupancy: usize, capacity: usize },
    #[error("ORAM block {id} out of range (capacity {capacity})")]
    UnknownBlock { id: u64, capacity: u64 },
    #[error("ORAM payload is {found} bytes, expected {expected}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("record does not fit: {0}")]
    OversizeRecord(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("malformed trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
