#![allow(dead_code)]

use std::io::Write;

use oblivmr::apps::{text_records, TEXT_RECORD_SIZE};
use oblivmr::{
    BlockFileMeta, Enclave, FileId, KvRecord, Location, PlainBlock, SealKey, UntrustedStore, KEY_LEN,
};

pub const KEY: [u8; 16] = [0x5a; 16];
pub const RS: usize = KEY_LEN + 8;

pub fn key() -> SealKey {
    SealKey::new(KEY)
}

/// Print a verdict line straight to stdout so it shows without `--nocapture`.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} criterion {criterion}: {detail}");
    let _ = out.flush();
}

/// Seal blocks whose records carry `u32` keys (big-endian, so byte order is
/// numeric order).
pub fn keyed_file(store: &mut UntrustedStore, blocks: &[Vec<u32>], value: &[u8]) -> FileId {
    let m = blocks[0].len();
    let meta = BlockFileMeta::new(RS, m).unwrap();
    let f = store.create_file(meta, Location::Memory).unwrap();
    let mut enc = Enclave::new(&key(), 2).unwrap();
    for (i, ks) in blocks.iter().enumerate() {
        let mut b = PlainBlock::dummy(f.0, i as u64, &meta);
        for (r, &k) in ks.iter().enumerate() {
            let rec = KvRecord::new(&k.to_be_bytes(), value, RS).unwrap();
            b.record_mut(r).copy_from_slice(rec.as_bytes());
        }
        enc.store(store, &b).unwrap();
    }
    f
}

pub fn chunk(keys: &[u32], m: usize) -> Vec<Vec<u32>> {
    keys.chunks(m).map(<[u32]>::to_vec).collect()
}

pub fn file_keys(store: &mut UntrustedStore, f: FileId) -> Vec<u32> {
    let mut enc = Enclave::new(&key(), 2).unwrap();
    let n = store.block_count(f).unwrap();
    let mut out = vec![];
    for i in 0..n {
        let b = enc.fetch(store, f, i).unwrap();
        out.extend(
            b.real_records()
                .map(|r| u32::from_be_bytes(r[..4].try_into().unwrap())),
        );
    }
    out
}

/// Seal `tokens` as one text record per token in `block_size` blocks.
pub fn text_file(store: &mut UntrustedStore, tokens: &[String], block_size: usize) -> FileId {
    let meta = BlockFileMeta::for_block_size(block_size, TEXT_RECORD_SIZE).unwrap();
    let recs = text_records(&tokens.join(" "), meta.record_size).unwrap();
    oblivmr::apps::encode_records(store, &key(), meta, Location::Memory, recs).unwrap()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Compare the trace of every input against the first. Returns the number of
/// runs and events per run, or `(input index, event index)` of the first
/// divergence.
pub fn sweep<I>(
    inputs: &[I],
    mut run: impl FnMut(&I) -> oblivmr::Trace,
) -> Result<(usize, usize), (usize, usize)> {
    let mut reference: Option<oblivmr::Trace> = None;
    for (j, input) in inputs.iter().enumerate() {
        let t = run(input);
        match &reference {
            None => reference = Some(t),
            Some(r) => {
                if let Some(i) = r.first_divergence(&t) {
                    return Err((j, i));
                }
            }
        }
    }
    Ok((inputs.len(), reference.map_or(0, |t| t.len())))
}
