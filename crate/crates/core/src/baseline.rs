//! Standalone ORAM-backed jobs used as the cost baseline.
//!
//! These do not use the MapReduce engine. Input blocks sit in one Path ORAM,
//! intermediate and output blocks in another, and every block the job needs
//! is fetched with an ORAM access: map into blocks, sort them with a
//! bottom-up merge sort whose per-block access count is fixed, then fold the
//! sorted records in one scan.

use crate::aggregate::AggregatorKind;
use crate::block_store::BlockFileMeta;
use crate::enclave::PlainBlock;
use crate::engine::{GroupFold, JobConfig, MapFunction};
use crate::error::{Error, Result};
use crate::oram::{OramOp, OramState, DEFAULT_Z};
use crate::record::{ct_assign, ct_less, is_dummy, write_dummy, KvRecord};
use crate::sort::{sort_block, SortOptions};

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    /// Real aggregates in key order.
    pub records: Vec<KvRecord>,
    pub oram_accesses: u64,
    pub max_stash: usize,
    /// Intermediate blocks produced by the map step.
    pub intermediate_blocks: u64,
}

struct Work {
    oram: OramState,
    meta: BlockFileMeta,
}

impl Work {
    fn read(&mut self, id: u64) -> Result<Vec<u8>> {
        self.oram.access(OramOp::Read, id, None)
    }

    fn write(&mut self, id: u64, data: &[u8]) -> Result<()> {
        self.oram.access(OramOp::Write, id, Some(data)).map(|_| ())
    }
}

/// Run `map_fn` and `config.aggregator` over `input` (plaintext block
/// payloads in `in_meta` geometry) entirely through Path ORAM.
pub fn run_oram_baseline(
    config: &JobConfig,
    map_fn: &dyn MapFunction,
    in_meta: BlockFileMeta,
    input: &[Vec<u8>],
    seed: u64,
) -> Result<BaselineOutcome> {
    config.validate()?;
    let meta = config.meta()?;
    let m = meta.records_per_block;
    let fan_out = map_fn.max_outputs();
    let n_in = input.len() as u64;
    let slots = n_in * in_meta.records_per_block as u64 * fan_out as u64;
    let n_mid = slots.div_ceil(m as u64);

    let mut inputs = OramState::new(n_in.max(1), DEFAULT_Z, in_meta.payload_size(), seed)?;
    for (i, block) in input.iter().enumerate() {
        inputs.preload(i as u64, block)?;
    }
    // two ping-pong regions for sorting, then the output region
    let mut work = Work {
        oram: OramState::new((3 * n_mid).max(1), DEFAULT_Z, meta.payload_size(), seed ^ 0x5eed)?
            .with_file_id(crate::oram::ORAM_FILE - 1),
        meta,
    };

    // map
    let mut out = PlainBlock::dummy(0, 0, &meta);
    let mut pos = 0;
    let mut written = 0u64;
    for i in 0..n_in {
        let block = inputs.access(OramOp::Read, i, None)?;
        for rec in block.chunks_exact(in_meta.record_size) {
            let mut staged = Vec::with_capacity(fan_out);
            if !is_dummy(rec) {
                map_fn.map(rec, &mut |k, v| {
                    if staged.len() == fan_out {
                        return Err(Error::MapOverflow(format!("more than {fan_out} outputs")));
                    }
                    staged.push(
                        KvRecord::new(k, v, meta.record_size)
                            .map_err(|e| Error::MapOverflow(e.to_string()))?,
                    );
                    Ok(())
                })?;
            }
            for j in 0..fan_out {
                match staged.get(j) {
                    Some(kv) => out.record_mut(pos).copy_from_slice(kv.as_bytes()),
                    None => write_dummy(out.record_mut(pos)),
                }
                pos += 1;
                if pos == m {
                    work.write(written, out.data())?;
                    written += 1;
                    out = PlainBlock::dummy(0, written, &meta);
                    pos = 0;
                }
            }
        }
    }
    if pos > 0 {
        work.write(written, out.data())?;
        written += 1;
    }
    debug_assert_eq!(written, n_mid);

    let sorted_base = oram_merge_sort(&mut work, n_mid)?;
    let records = fold_scan(&mut work, &config.aggregator, sorted_base, n_mid, 2 * n_mid)?;
    Ok(BaselineOutcome {
        records,
        oram_accesses: inputs.accesses() + work.oram.accesses(),
        max_stash: inputs.max_stash().max(work.oram.max_stash()),
        intermediate_blocks: n_mid,
    })
}

/// Sort blocks `0..n` of the work ORAM. Returns the region base (0 or `n`)
/// holding the result.
fn oram_merge_sort(work: &mut Work, n: u64) -> Result<u64> {
    let meta = work.meta;
    let m = meta.records_per_block;
    let rs = meta.record_size;
    for i in 0..n {
        let data = work.read(i)?;
        let mut b = PlainBlock::from_records(0, i, rs, data)?;
        sort_block(&mut b, SortOptions::default())?;
        work.write(i, b.data())?;
    }
    let (mut src, mut dst) = (0u64, n);
    let dummy = KvRecord::dummy(rs);
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            // cursors: (block, record) in each run
            let (mut lb, mut lr) = (lo, 0usize);
            let (mut rb, mut rr) = (mid, 0usize);
            for o in lo..hi {
                // always four reads: current and next block of each run
                let fetch = |w: &mut Work, b: u64, end: u64| -> Result<Option<Vec<u8>>> {
                    let real = b < end;
                    let data = w.read(src + if real { b } else { lo })?;
                    Ok(real.then_some(data))
                };
                let l0 = fetch(work, lb, mid)?;
                let l1 = fetch(work, lb + 1, mid)?;
                let r0 = fetch(work, rb, hi)?;
                let r1 = fetch(work, rb + 1, hi)?;
                let head = |a: &Option<Vec<u8>>, b: &Option<Vec<u8>>, r: usize| -> Vec<u8> {
                    let (blk, idx) = if r < m { (a, r) } else { (b, r - m) };
                    match blk {
                        Some(d) => d[idx * rs..(idx + 1) * rs].to_vec(),
                        None => dummy.as_bytes().to_vec(),
                    }
                };
                let mut block = vec![0u8; m * rs];
                for k in 0..m {
                    let hl = head(&l0, &l1, lr);
                    let hr = head(&r0, &r1, rr);
                    let take_left = !ct_less(&hr, &hl);
                    let slot = &mut block[k * rs..(k + 1) * rs];
                    slot.copy_from_slice(&hr);
                    ct_assign(take_left, slot, &hl);
                    lr += take_left as usize;
                    rr += !take_left as usize;
                }
                if lr >= m {
                    lb += 1;
                    lr -= m;
                }
                if rr >= m {
                    rb += 1;
                    rr -= m;
                }
                work.write(dst + o, &block)?;
            }
            lo = hi;
        }
        std::mem::swap(&mut src, &mut dst);
        width *= 2;
    }
    Ok(src)
}

/// One pass over the sorted blocks writing one padded output block per input
/// block; returns the real aggregates.
fn fold_scan(
    work: &mut Work,
    agg: &AggregatorKind,
    base: u64,
    n: u64,
    out_base: u64,
) -> Result<Vec<KvRecord>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let rs = work.meta.record_size;
    let m = work.meta.records_per_block;
    let mut cur = work.read(base)?;
    let mut fold = GroupFold::new(agg, &cur[..rs]);
    let mut results = Vec::new();
    let mut rec = vec![0u8; rs];
    for b in 0..n {
        let next_block = if b + 1 < n {
            Some(work.read(base + b + 1)?)
        } else {
            None
        };
        let mut out = vec![0u8; m * rs];
        for r in 0..m {
            let next = if r + 1 < m {
                Some(&cur[(r + 1) * rs..(r + 2) * rs])
            } else {
                next_block.as_deref().map(|d| &d[..rs])
            };
            if fold.step(next, &mut rec) {
                results.push(KvRecord::from_bytes(&rec));
            }
            out[r * rs..(r + 1) * rs].copy_from_slice(&rec);
        }
        work.write(out_base + b, &out)?;
        if let Some(d) = next_block {
            cur = d;
        }
    }
    if fold.unsorted {
        return Err(Error::UnsortedInput);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::{
        gaussian_points, initial_centroids, kmeans_reference, point_records, text_records, word_counts,
        wordcount_config, wordcount_reference, zipf_corpus, KMeans, WordCount, TEXT_RECORD_SIZE,
    };
    use crate::enclave::SealKey;

    fn blocks(recs: &[KvRecord], meta: BlockFileMeta) -> Vec<Vec<u8>> {
        recs.chunks(meta.records_per_block)
            .map(|c| {
                let mut b = PlainBlock::dummy(0, 0, &meta);
                for (i, r) in c.iter().enumerate() {
                    b.record_mut(i).copy_from_slice(r.as_bytes());
                }
                b.data().to_vec()
            })
            .collect()
    }

    #[test]
    fn wordcount_baseline_matches_reference() {
        for (tokens, seed) in [(0usize, 0u64), (1, 1), (37, 2), (500, 3)] {
            let text = zipf_corpus(tokens, 40, 1.0, seed).join(" ");
            let meta = BlockFileMeta::new(TEXT_RECORD_SIZE, 8).unwrap();
            let input = blocks(&text_records(&text, TEXT_RECORD_SIZE).unwrap(), meta);
            let cfg = wordcount_config(SealKey::new([1; 16]), 256);
            let out = run_oram_baseline(&cfg, &WordCount::default(), meta, &input, seed).unwrap();
            assert_eq!(word_counts(&out.records), wordcount_reference(&text));
        }
    }

    #[test]
    fn kmeans_baseline_matches_reference() {
        let pts = gaussian_points(300, 3, 2, 4);
        let cents = initial_centroids(&pts, 3);
        let km = KMeans::new(cents.clone()).unwrap();
        let cfg = km.config(SealKey::new([1; 16]), 512).unwrap();
        let meta = km.input_meta(512).unwrap();
        let input = blocks(&point_records(&pts, meta.record_size).unwrap(), meta);
        let out = run_oram_baseline(&cfg, &km, meta, &input, 9).unwrap();
        let got = km.update(&out.records).unwrap();
        for (a, b) in got.iter().zip(kmeans_reference(&pts, &cents)) {
            for (x, y) in a.coordinates.iter().zip(&b.coordinates) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
