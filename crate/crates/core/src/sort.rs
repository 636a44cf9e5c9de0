//! External sorts over sealed block files.
//!
//! [`bitonic_sort_blocks`] runs Batcher's network with whole blocks as the
//! elements: every block compare-exchange loads both blocks, merges their
//! records with a record-level network inside the enclave, and writes both
//! back. [`merge_sort_blocks`] is the ordinary bottom-up two-way merge sort,
//! kept as a leaky baseline.

use crate::block_store::{FileId, Location, UntrustedStore};
use crate::enclave::{touch_record, Enclave, PlainBlock, Slot};
use crate::error::{Error, Result};
use crate::oblivious::{
    bitonic_merge_records, bitonic_sort_records, padding_record, RecordSlots, SlotLabel, SortDirection,
    SCRATCH_FILE,
};
use crate::record::ct_less;
use crate::trace::AccessOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SortOptions {
    pub direction: SortDirection,
    /// Masked swaps in the record network. Off only to measure their cost.
    pub oblivious_swap: bool,
}

impl Default for SortOptions {
    fn default() -> Self {
        SortOptions {
            direction: SortDirection::ASCENDING,
            oblivious_swap: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SortStats {
    pub pair_ops: u64,
    pub compare_exchanges: u64,
    pub passes: u32,
}

/// Block compare-exchanges of a bitonic sort over `n = 2^k` blocks.
pub fn block_pair_ops(n: u64) -> u64 {
    crate::oblivious::bitonic_network_size(n)
}

/// Sort the records of one block in place with a bitonic network, padding the
/// workspace up to a power of two. Returns the compare-exchange count.
pub fn sort_block(block: &mut PlainBlock, opts: SortOptions) -> Result<u64> {
    let m = block.records_per_block();
    let rs = block.record_size();
    let p = m.next_power_of_two();
    let pad = padding_record(rs, opts.direction);
    let mut data = Vec::with_capacity(p * rs);
    data.extend_from_slice(block.data());
    for _ in m..p {
        data.extend_from_slice(&pad);
    }
    let labels = (0..p)
        .map(|r| {
            if r < m {
                (block.file_id, block.block_id, r as u32)
            } else {
                (SCRATCH_FILE, 0, r as u32)
            }
        })
        .collect();
    let mut slots = RecordSlots::with_labels(data, rs, labels);
    slots.set_oblivious(opts.oblivious_swap);
    let ces = bitonic_sort_records(&mut slots, opts.direction)?;
    block.data_mut().copy_from_slice(&slots.into_data()[..m * rs]);
    Ok(ces)
}

/// Load two blocks into a `[a ascending | padding | b reversed]` workspace,
/// sort or merge it, and hand the first half to the block that should hold
/// the smaller records.
fn merge_pair(
    a: &mut PlainBlock,
    b: &mut PlainBlock,
    a_first: bool,
    full_sort: bool,
    opts: SortOptions,
) -> Result<u64> {
    let m = a.records_per_block();
    let rs = a.record_size();
    let p = (2 * m).next_power_of_two();
    let pad = padding_record(rs, opts.direction);
    let mut data = vec![0u8; p * rs];
    let mut labels: Vec<SlotLabel> = Vec::with_capacity(p);
    for pos in 0..p {
        let dst = &mut data[pos * rs..(pos + 1) * rs];
        if pos < m {
            dst.copy_from_slice(a.record(pos));
            labels.push((a.file_id, a.block_id, pos as u32));
        } else if pos >= p - m {
            let r = p - 1 - pos;
            dst.copy_from_slice(b.record(r));
            labels.push((b.file_id, b.block_id, r as u32));
        } else {
            dst.copy_from_slice(&pad);
            labels.push((SCRATCH_FILE, 0, pos as u32));
        }
    }
    let mut slots = RecordSlots::with_labels(data, rs, labels);
    slots.set_oblivious(opts.oblivious_swap);
    let ces = if full_sort {
        bitonic_sort_records(&mut slots, opts.direction)?
    } else {
        bitonic_merge_records(&mut slots, opts.direction)?
    };
    let data = slots.into_data();
    let (lo, hi) = data[..2 * m * rs].split_at(m * rs);
    let (to_a, to_b) = if a_first { (lo, hi) } else { (hi, lo) };
    a.data_mut().copy_from_slice(to_a);
    b.data_mut().copy_from_slice(to_b);
    Ok(ces)
}

/// Obliviously sort a block file into a new file.
///
/// The block count must be a power of two (or zero). The first network stage
/// reads the input and writes the output file in order; every later stage
/// works in place on the output. Each block compare-exchange is exactly two
/// block reads and two block writes, so the untrusted trace depends on the
/// block count alone.
pub fn bitonic_sort_blocks(
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    input: FileId,
    opts: SortOptions,
) -> Result<(FileId, SortStats)> {
    let meta = store.meta(input)?;
    let n = meta.block_count as usize;
    if n > 0 && !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let mut meta_out = meta;
    meta_out.block_count = 0;
    let out = store.create_file(meta_out, Location::Memory)?;
    let mut stats = SortStats::default();
    if n == 1 {
        let s = enclave.load(store, input, 0)?;
        stats.compare_exchanges += sort_block(enclave.block_mut(s), opts)?;
        enclave.retarget(s, out, 0);
        enclave.flush(store, s)?;
        return Ok((out, stats));
    }
    let mut k = 2;
    while k <= n {
        let mut j = k / 2;
        while j > 0 {
            let first = k == 2;
            let from = if first { input } else { out };
            for i in 0..n {
                let l = i ^ j;
                if l <= i {
                    continue;
                }
                let up = (i & k) == 0;
                let sa = enclave.load(store, from, i as u64)?;
                let sb = enclave.load(store, from, l as u64)?;
                let (a, b) = enclave.pair_mut(sa, sb);
                stats.compare_exchanges += merge_pair(a, b, up, first, opts)?;
                if first {
                    enclave.retarget(sa, out, i as u64);
                    enclave.retarget(sb, out, l as u64);
                }
                enclave.flush(store, sa)?;
                enclave.flush(store, sb)?;
                stats.pair_ops += 1;
            }
            j /= 2;
        }
        stats.passes += 1;
        k *= 2;
    }
    Ok((out, stats))
}

struct Cursor {
    slot: Slot,
    block: u64,
    end: u64,
    record: usize,
}

impl Cursor {
    fn open(
        enclave: &mut Enclave,
        store: &mut UntrustedStore,
        file: FileId,
        lo: u64,
        end: u64,
    ) -> Result<Option<Cursor>> {
        if lo >= end {
            return Ok(None);
        }
        let slot = enclave.load(store, file, lo)?;
        Ok(Some(Cursor {
            slot,
            block: lo,
            end,
            record: 0,
        }))
    }

    fn head<'e>(&self, enclave: &'e Enclave) -> Result<&'e [u8]> {
        let b = enclave.block(self.slot);
        touch_record(b, self.record, AccessOp::Read)?;
        Ok(b.record(self.record))
    }

    fn advance(
        self,
        enclave: &mut Enclave,
        store: &mut UntrustedStore,
        file: FileId,
    ) -> Result<Option<Cursor>> {
        let m = enclave.block(self.slot).records_per_block();
        if self.record + 1 < m {
            return Ok(Some(Cursor {
                record: self.record + 1,
                ..self
            }));
        }
        enclave.release(self.slot);
        Cursor::open(enclave, store, file, self.block + 1, self.end)
    }
}

/// Non-oblivious bottom-up merge sort into a new file.
///
/// Which input block is read next depends on the records, so the trace leaks
/// the relative order of the runs. Needs a buffer of at least three blocks.
pub fn merge_sort_blocks(
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    input: FileId,
    opts: SortOptions,
) -> Result<(FileId, SortStats)> {
    if enclave.buffer().capacity() < 3 {
        return Err(Error::BufferCapacity(enclave.buffer().capacity()));
    }
    let meta = store.meta(input)?;
    let n = meta.block_count;
    let mut meta_out = meta;
    meta_out.block_count = 0;
    let mut stats = SortStats::default();

    let mut cur = store.create_file(meta_out, Location::Memory)?;
    for b in 0..n {
        let s = enclave.load(store, input, b)?;
        stats.compare_exchanges += sort_block(enclave.block_mut(s), opts)?;
        enclave.retarget(s, cur, b);
        enclave.flush(store, s)?;
    }
    stats.passes = 1;

    let mut width = 1;
    while width < n {
        let next = store.create_file(meta_out, Location::Memory)?;
        let mut out_index = 0;
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            merge_runs(
                enclave,
                store,
                cur,
                (lo, mid, hi),
                next,
                &mut out_index,
                opts.direction,
            )?;
            lo = hi;
        }
        store.remove(cur)?;
        cur = next;
        width *= 2;
        stats.passes += 1;
    }
    Ok((cur, stats))
}

fn merge_runs(
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    src: FileId,
    (lo, mid, hi): (u64, u64, u64),
    dst: FileId,
    out_index: &mut u64,
    dir: SortDirection,
) -> Result<()> {
    let meta = store.meta(src)?;
    let mut left = Cursor::open(enclave, store, src, lo, mid)?;
    let mut right = Cursor::open(enclave, store, src, mid, hi)?;
    let mut out: Option<(Slot, usize)> = None;
    loop {
        let take_left = match (&left, &right) {
            (Some(l), Some(r)) => {
                let lh = l.head(enclave)?;
                let rh = r.head(enclave)?;
                if dir.ascending {
                    !ct_less(rh, lh)
                } else {
                    !ct_less(lh, rh)
                }
            }
            (Some(l), None) => {
                l.head(enclave)?;
                true
            }
            (None, Some(r)) => {
                r.head(enclave)?;
                false
            }
            (None, None) => break,
        };
        let (slot, pos) = match out {
            Some(o) => o,
            None => {
                let blank = PlainBlock::dummy(dst.0, *out_index, &meta);
                (enclave.insert(store, blank)?, 0)
            }
        };
        let taken = if take_left { left.take() } else { right.take() }.expect("cursor present");
        let rec = enclave.block(taken.slot).record(taken.record).to_vec();
        let ob = enclave.block_mut(slot);
        ob.record_mut(pos).copy_from_slice(&rec);
        touch_record(ob, pos, AccessOp::Write)?;
        if pos + 1 == meta.records_per_block {
            enclave.flush(store, slot)?;
            *out_index += 1;
            out = None;
        } else {
            out = Some((slot, pos + 1));
        }
        let advanced = taken.advance(enclave, store, src)?;
        if take_left {
            left = advanced;
        } else {
            right = advanced;
        }
    }
    debug_assert!(out.is_none());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_store::BlockFileMeta;
    use crate::enclave::SealKey;
    use crate::record::{KvRecord, KEY_LEN};
    use crate::trace::{capture, trace_stats};
    use rand::{Rng, SeedableRng};

    const RS: usize = KEY_LEN + 8;

    fn file_of(keys: &[Vec<u32>], cap: usize) -> (UntrustedStore, Enclave, FileId) {
        let m = keys[0].len();
        let mut store = UntrustedStore::new();
        let meta = BlockFileMeta::new(RS, m).unwrap();
        let f = store.create_file(meta, Location::Memory).unwrap();
        let mut enc = Enclave::new(&SealKey::new([1; 16]), cap).unwrap();
        for (i, ks) in keys.iter().enumerate() {
            let mut b = PlainBlock::dummy(f.0, i as u64, &meta);
            for (r, &k) in ks.iter().enumerate() {
                let rec = KvRecord::new(&k.to_be_bytes(), &[0; 8], RS).unwrap();
                b.record_mut(r).copy_from_slice(rec.as_bytes());
            }
            enc.store(&mut store, &b).unwrap();
        }
        (store, enc, f)
    }

    fn keys_of(store: &mut UntrustedStore, enc: &mut Enclave, f: FileId) -> Vec<u32> {
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

    fn random_keys(seed: u64, n: usize, m: usize) -> Vec<Vec<u32>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(0..50)).collect())
            .collect()
    }

    #[test]
    fn four_blocks_cost_twelve_reads_and_writes() {
        let (mut store, mut enc, f) = file_of(&random_keys(1, 4, 4), 2);
        let (r, t) =
            capture(|| bitonic_sort_blocks(&mut enc, &mut store, f, SortOptions::default())).unwrap();
        let (out, stats) = r.unwrap();
        assert_eq!(stats.pair_ops, 6);
        let s = trace_stats(&t);
        assert_eq!(s.untrusted_block_reads(), 12);
        assert_eq!(s.untrusted_block_writes(), 12);
        assert_eq!(enc.buffer().evictions(), 0);
        let got = keys_of(&mut store, &mut enc, out);
        let mut want: Vec<u32> = random_keys(1, 4, 4).concat();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn pair_op_counts_follow_closed_form() {
        for n in [2usize, 4, 8, 16] {
            let (mut store, mut enc, f) = file_of(&random_keys(n as u64, n, 3), 3);
            let (_, stats) = bitonic_sort_blocks(&mut enc, &mut store, f, SortOptions::default()).unwrap();
            assert_eq!(stats.pair_ops, block_pair_ops(n as u64));
        }
    }

    #[test]
    fn odd_records_per_block_and_descending() {
        for m in [1usize, 3, 5, 30] {
            let keys = random_keys(m as u64, 8, m);
            for ascending in [true, false] {
                let (mut store, mut enc, f) = file_of(&keys, 3);
                let opts = SortOptions {
                    direction: SortDirection { ascending },
                    oblivious_swap: true,
                };
                let (out, _) = bitonic_sort_blocks(&mut enc, &mut store, f, opts).unwrap();
                let mut want = keys.concat();
                want.sort();
                if !ascending {
                    want.reverse();
                }
                assert_eq!(keys_of(&mut store, &mut enc, out), want, "m={m} asc={ascending}");
            }
        }
    }

    #[test]
    fn one_block_is_copied_and_sorted() {
        let (mut store, mut enc, f) = file_of(&[vec![3, 1, 2, 0]], 2);
        let (out, stats) = bitonic_sort_blocks(&mut enc, &mut store, f, SortOptions::default()).unwrap();
        assert_eq!(stats.pair_ops, 0);
        assert_eq!(keys_of(&mut store, &mut enc, out), vec![0, 1, 2, 3]);
        assert_ne!(out, f);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let (mut store, mut enc, f) = file_of(&random_keys(0, 3, 2), 3);
        assert!(matches!(
            bitonic_sort_blocks(&mut enc, &mut store, f, SortOptions::default()),
            Err(Error::NotPowerOfTwo(3))
        ));
    }

    #[test]
    fn merge_sort_agrees_with_bitonic() {
        for n in [1usize, 2, 5, 8] {
            let keys = random_keys(10 + n as u64, n, 4);
            let (mut s1, mut e1, f1) = file_of(&keys, 3);
            let (mut s2, mut e2, f2) = file_of(&keys, 3);
            let (o2, _) = merge_sort_blocks(&mut e2, &mut s2, f2, SortOptions::default()).unwrap();
            let mut want = keys.concat();
            want.sort();
            assert_eq!(keys_of(&mut s2, &mut e2, o2), want);
            if n.is_power_of_two() {
                let (o1, _) = bitonic_sort_blocks(&mut e1, &mut s1, f1, SortOptions::default()).unwrap();
                let a: Vec<_> = (0..n as u64)
                    .map(|i| e1.fetch(&mut s1, o1, i).unwrap().data().to_vec())
                    .collect();
                let b: Vec<_> = (0..n as u64)
                    .map(|i| e2.fetch(&mut s2, o2, i).unwrap().data().to_vec())
                    .collect();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn merge_sort_leaks_run_order() {
        let lo_hi = vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]];
        let hi_lo = vec![vec![5, 6], vec![7, 8], vec![1, 2], vec![3, 4]];
        let mut traces = vec![];
        for keys in [lo_hi, hi_lo] {
            let (mut store, mut enc, f) = file_of(&keys, 3);
            let (r, t) =
                capture(|| merge_sort_blocks(&mut enc, &mut store, f, SortOptions::default())).unwrap();
            r.unwrap();
            traces.push(t);
        }
        assert!(traces[0].first_divergence(&traces[1]).is_some());
        assert_eq!(trace_stats(&traces[0]).untrusted_block_reads(), 4 * 3);
    }
}
