//! Fixtures shared by the criterion benchmarks.

use oblivmr::apps::{encode_records, text_records, zipf_corpus, TEXT_RECORD_SIZE};
use oblivmr::{BlockFileMeta, FileId, KvRecord, Location, SealKey, UntrustedStore, KEY_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KEY: [u8; 16] = [0x42; 16];

pub fn key() -> SealKey {
    SealKey::new(KEY)
}

/// `n` records with random 8-byte keys.
pub fn random_records(n: usize, record_size: usize, seed: u64) -> Vec<KvRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| KvRecord::new(&rng.gen::<[u8; 8]>(), &[], record_size).unwrap())
        .collect()
}

/// A sealed file of `blocks` blocks of random records.
pub fn random_file(store: &mut UntrustedStore, blocks: usize, block_size: usize, seed: u64) -> FileId {
    let meta = BlockFileMeta::for_block_size(block_size, KEY_LEN + 16).unwrap();
    let recs = random_records(blocks * meta.records_per_block, meta.record_size, seed);
    encode_records(store, &key(), meta, Location::Memory, recs).unwrap()
}

/// A sealed Zipf text corpus filling `blocks` blocks.
pub fn text_file(store: &mut UntrustedStore, blocks: usize, block_size: usize, seed: u64) -> FileId {
    let meta = BlockFileMeta::for_block_size(block_size, TEXT_RECORD_SIZE).unwrap();
    let text = zipf_corpus(blocks * meta.records_per_block, 5000, 1.0, seed).join(" ");
    let recs = text_records(&text, meta.record_size).unwrap();
    encode_records(store, &key(), meta, Location::Memory, recs).unwrap()
}
