//! Data-independent record operations inside the enclave.
//!
//! [`RecordSlots`] is a traced scratch array of records. Each slot carries a
//! fixed address label, and every read or write of a slot is reported as an
//! enclave record access. The oblivious operations touch the same slots in the
//! same order no matter what the records contain.

use crate::error::{Error, Result};
use crate::record::{ct_assign, ct_less, ct_swap, write_dummy, KvRecord};
use crate::trace::{self, AccessOp, Granularity, Region};

/// File id used to label enclave scratch slots that belong to no block.
pub const SCRATCH_FILE: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SortDirection {
    pub ascending: bool,
}

impl SortDirection {
    pub const ASCENDING: SortDirection = SortDirection { ascending: true };
    pub const DESCENDING: SortDirection = SortDirection { ascending: false };
}

impl Default for SortDirection {
    fn default() -> Self {
        Self::ASCENDING
    }
}

/// Returns `a` if `cond`, else `b`. Both inputs are read in full.
pub fn o_select(cond: bool, a: &KvRecord, b: &KvRecord) -> KvRecord {
    let mut out = b.as_bytes().to_vec();
    ct_assign(cond, &mut out, a.as_bytes());
    KvRecord::from_bytes(&out)
}

/// Address label of one slot: `(file_id, block_id, record_index)`.
pub type SlotLabel = (u64, u64, u32);

/// Traced array of fixed-size records.
#[derive(Debug, Clone)]
pub struct RecordSlots {
    record_size: usize,
    data: Vec<u8>,
    labels: Vec<SlotLabel>,
    oblivious: bool,
    compare_exchanges: u64,
}

impl RecordSlots {
    /// Slots labelled `(file_id, block_id, i)`.
    pub fn new(data: Vec<u8>, record_size: usize, file_id: u64, block_id: u64) -> Self {
        let n = data.len() / record_size;
        let labels = (0..n).map(|i| (file_id, block_id, i as u32)).collect();
        Self::with_labels(data, record_size, labels)
    }

    /// Unattached enclave scratch.
    pub fn scratch(data: Vec<u8>, record_size: usize) -> Self {
        Self::new(data, record_size, SCRATCH_FILE, 0)
    }

    pub fn from_records(records: &[KvRecord]) -> Self {
        let record_size = records.first().map_or(KEY_LEN_PLUS_ONE, |r| r.as_bytes().len());
        let mut data = Vec::with_capacity(records.len() * record_size);
        for r in records {
            assert_eq!(r.as_bytes().len(), record_size, "mixed record sizes");
            data.extend_from_slice(r.as_bytes());
        }
        Self::scratch(data, record_size)
    }

    pub fn with_labels(data: Vec<u8>, record_size: usize, labels: Vec<SlotLabel>) -> Self {
        assert!(record_size > 0 && data.len() % record_size == 0);
        assert_eq!(labels.len(), data.len() / record_size);
        RecordSlots {
            record_size,
            data,
            labels,
            oblivious: true,
            compare_exchanges: 0,
        }
    }

    /// Use a branching swap instead of the masked one. For cost comparisons
    /// and leakage demonstrations only.
    pub fn set_oblivious(&mut self, oblivious: bool) {
        self.oblivious = oblivious;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn record_size(&self) -> usize {
        self.record_size
    }

    pub fn compare_exchanges(&self) -> u64 {
        self.compare_exchanges
    }

    /// Untraced view, for callers outside the protected computation.
    pub fn peek(&self, i: usize) -> &[u8] {
        &self.data[i * self.record_size..(i + 1) * self.record_size]
    }

    pub fn to_records(&self) -> Vec<KvRecord> {
        self.data
            .chunks_exact(self.record_size)
            .map(KvRecord::from_bytes)
            .collect()
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn touch(&self, i: usize, op: AccessOp) {
        let (f, b, r) = self.labels[i];
        trace::emit(Region::Enclave, Granularity::Record, op, f, b, Some(r));
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::RecordOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// Traced read of slot `i`.
    pub fn read(&self, i: usize) -> &[u8] {
        self.touch(i, AccessOp::Read);
        self.peek(i)
    }

    /// Traced write of slot `i`.
    pub fn write(&mut self, i: usize, src: &[u8]) {
        self.touch(i, AccessOp::Write);
        let rs = self.record_size;
        self.data[i * rs..(i + 1) * rs].copy_from_slice(src);
    }

    /// Traced overwrite of slot `i` with a dummy.
    pub fn write_dummy(&mut self, i: usize) {
        self.touch(i, AccessOp::Write);
        let rs = self.record_size;
        write_dummy(&mut self.data[i * rs..(i + 1) * rs]);
    }

    fn two_mut(&mut self, a: usize, b: usize) -> (&mut [u8], &mut [u8]) {
        assert_ne!(a, b);
        let rs = self.record_size;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (left, right) = self.data.split_at_mut(hi * rs);
        let x = &mut left[lo * rs..(lo + 1) * rs];
        let y = &mut right[..rs];
        if a < b {
            (x, y)
        } else {
            (y, x)
        }
    }

    /// `out := cond ? a : b`. Reads `a` and `b`, writes `out`, whatever `cond` is.
    pub fn o_select(&mut self, cond: bool, a: usize, b: usize, out: usize) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        self.check(out)?;
        let mut tmp = self.read(b).to_vec();
        ct_assign(cond, &mut tmp, self.read(a));
        self.write(out, &tmp);
        Ok(())
    }

    /// Exchange slots `a` and `b` iff `cond`. Always two reads then two writes.
    pub fn o_swap(&mut self, cond: bool, a: usize, b: usize) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            self.touch(a, AccessOp::Read);
            self.touch(b, AccessOp::Read);
            self.touch(a, AccessOp::Write);
            self.touch(b, AccessOp::Write);
            return Ok(());
        }
        self.swap_masked(cond, a, b);
        Ok(())
    }

    #[inline]
    fn swap_masked(&mut self, cond: bool, a: usize, b: usize) {
        self.touch(a, AccessOp::Read);
        self.touch(b, AccessOp::Read);
        let (x, y) = self.two_mut(a, b);
        ct_swap(cond, x, y);
        self.touch(a, AccessOp::Write);
        self.touch(b, AccessOp::Write);
    }

    /// The leaky variant: writes happen only when the swap does.
    pub fn branchy_swap(&mut self, cond: bool, a: usize, b: usize) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        self.touch(a, AccessOp::Read);
        self.touch(b, AccessOp::Read);
        if cond && a != b {
            let (x, y) = self.two_mut(a, b);
            x.swap_with_slice(y);
            self.touch(a, AccessOp::Write);
            self.touch(b, AccessOp::Write);
        }
        Ok(())
    }

    /// Order slots `a` and `b` so that `a` comes first in `dir`.
    ///
    /// Realized as a swap conditioned on the pair being out of order; with
    /// oblivious mode on (the default) the trace is 2 reads and 2 writes.
    #[inline]
    pub fn compare_exchange(&mut self, dir: SortDirection, a: usize, b: usize) {
        self.compare_exchanges += 1;
        let out_of_order = {
            let (x, y) = (self.peek(a), self.peek(b));
            if dir.ascending {
                ct_less(y, x)
            } else {
                ct_less(x, y)
            }
        };
        if self.oblivious {
            self.swap_masked(out_of_order, a, b);
        } else {
            // indices come from the network and are always valid
            let _ = self.branchy_swap(out_of_order, a, b);
        }
    }
}

const KEY_LEN_PLUS_ONE: usize = crate::record::KEY_LEN + 1;

/// Number of compare-exchanges a bitonic sorter performs on `n = 2^k` items.
pub fn bitonic_network_size(n: u64) -> u64 {
    if n < 2 {
        return 0;
    }
    let lg = n.trailing_zeros() as u64;
    n * lg * (lg + 1) / 4
}

/// Sort all slots in place with Batcher's bitonic network.
///
/// The slot count must be a power of two; pad with dummies first. Returns the
/// number of compare-exchanges executed, always `n·log n·(log n + 1)/4`.
pub fn bitonic_sort_records(slots: &mut RecordSlots, dir: SortDirection) -> Result<u64> {
    let n = slots.len();
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let before = slots.compare_exchanges();
    let mut k = 2;
    while k <= n {
        let mut j = k / 2;
        while j > 0 {
            for i in 0..n {
                let l = i ^ j;
                if l > i {
                    let up = ((i & k) == 0) == dir.ascending;
                    slots.compare_exchange(SortDirection { ascending: up }, i, l);
                }
            }
            j /= 2;
        }
        k *= 2;
    }
    Ok(slots.compare_exchanges() - before)
}

/// Sort a bitonic sequence of power-of-two length. `n/2 · log n` compare-exchanges.
pub fn bitonic_merge_records(slots: &mut RecordSlots, dir: SortDirection) -> Result<u64> {
    let n = slots.len();
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let before = slots.compare_exchanges();
    let mut j = n / 2;
    while j > 0 {
        for i in 0..n {
            let l = i ^ j;
            if l > i {
                slots.compare_exchange(dir, i, l);
            }
        }
        j /= 2;
    }
    Ok(slots.compare_exchanges() - before)
}

/// The record that sorts last in `dir`: used to pad workspaces so padding
/// ends up past every real slot.
pub fn padding_record(record_size: usize, dir: SortDirection) -> Vec<u8> {
    let mut r = vec![0u8; record_size];
    if dir.ascending {
        write_dummy(&mut r);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::KEY_LEN;
    use crate::trace::{capture, Trace};
    use proptest::prelude::*;

    const RS: usize = KEY_LEN + 8;

    fn rec(k: u8) -> KvRecord {
        KvRecord::new(&[k], &[k; 8], RS).unwrap()
    }

    fn slots(keys: &[u8]) -> RecordSlots {
        RecordSlots::from_records(&keys.iter().map(|&k| rec(k)).collect::<Vec<_>>())
    }

    fn ops(t: &Trace) -> Vec<(AccessOp, u32)> {
        t.events.iter().map(|e| (e.op, e.record_index.unwrap())).collect()
    }

    #[test]
    fn o_select_reads_both_and_traces_identically() {
        let (a, b) = (rec(1), rec(2));
        assert_eq!(o_select(true, &a, &b), a);
        assert_eq!(o_select(false, &a, &b), b);
        let mut traces = vec![];
        for cond in [true, false] {
            let mut s = slots(&[1, 2, 0]);
            let (r, t) = capture(|| s.o_select(cond, 0, 1, 2)).unwrap();
            r.unwrap();
            assert_eq!(s.peek(2), if cond { rec(1) } else { rec(2) }.as_bytes());
            traces.push(t);
        }
        assert_eq!(
            ops(&traces[0]),
            vec![(AccessOp::Read, 1), (AccessOp::Read, 0), (AccessOp::Write, 2)]
        );
        assert_eq!(traces[0].first_divergence(&traces[1]), None);
    }

    #[test]
    fn o_swap_contract() {
        let mut traces = vec![];
        for cond in [true, false] {
            let mut s = slots(&[1, 2]);
            let (r, t) = capture(|| s.o_swap(cond, 0, 1)).unwrap();
            r.unwrap();
            let expect = if cond { [2, 1] } else { [1, 2] };
            assert_eq!(s.peek(0), rec(expect[0]).as_bytes());
            assert_eq!(s.peek(1), rec(expect[1]).as_bytes());
            assert_eq!(
                ops(&t),
                vec![
                    (AccessOp::Read, 0),
                    (AccessOp::Read, 1),
                    (AccessOp::Write, 0),
                    (AccessOp::Write, 1)
                ]
            );
            traces.push(t);
        }
        assert_eq!(traces[0].first_divergence(&traces[1]), None);
    }

    #[test]
    fn branchy_swap_leaks_condition() {
        let mut s = slots(&[1, 2]);
        let (r, t) = capture(|| s.branchy_swap(false, 0, 1)).unwrap();
        r.unwrap();
        assert_eq!(ops(&t), vec![(AccessOp::Read, 0), (AccessOp::Read, 1)]);
    }

    #[test]
    fn random_o_swaps_all_trace_the_same() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ((), t) = capture(|| {
            for _ in 0..10_000 {
                let mut s = slots(&[rng.gen(), rng.gen()]);
                s.o_swap(rng.gen(), 0, 1).unwrap();
            }
        })
        .unwrap();
        assert_eq!(t.len(), 40_000);
        for chunk in t.events.chunks(4) {
            let got: Vec<_> = chunk.iter().map(|e| (e.op, e.record_index.unwrap())).collect();
            assert_eq!(
                got,
                vec![
                    (AccessOp::Read, 0),
                    (AccessOp::Read, 1),
                    (AccessOp::Write, 0),
                    (AccessOp::Write, 1)
                ]
            );
        }
    }

    #[test]
    fn compare_exchange_orders_and_hides_outcome() {
        let mut a = slots(&[5, 3]);
        let (_, ta) = capture(|| a.compare_exchange(SortDirection::ASCENDING, 0, 1)).unwrap();
        assert_eq!(a.peek(0), rec(3).as_bytes());
        let mut b = slots(&[3, 5]);
        let (_, tb) = capture(|| b.compare_exchange(SortDirection::ASCENDING, 0, 1)).unwrap();
        assert_eq!(b.peek(0), rec(3).as_bytes());
        assert_eq!(ta.first_divergence(&tb), None);

        let mut c = RecordSlots::from_records(&[KvRecord::dummy(RS), rec(9)]);
        c.compare_exchange(SortDirection::ASCENDING, 0, 1);
        assert_eq!(c.peek(0), rec(9).as_bytes());
        c.compare_exchange(SortDirection::DESCENDING, 0, 1);
        assert!(crate::record::is_dummy(c.peek(0)));
    }

    /// Every permutation of 8 distinct keys against the standard library sort.
    #[test]
    fn bitonic_sorts_all_permutations_of_eight() {
        fn permute(v: &mut Vec<u8>, k: usize, out: &mut Vec<Vec<u8>>) {
            if k == v.len() {
                out.push(v.clone());
                return;
            }
            for i in k..v.len() {
                v.swap(k, i);
                permute(v, k + 1, out);
                v.swap(k, i);
            }
        }
        let mut perms = vec![];
        permute(&mut (1..=8).collect(), 0, &mut perms);
        assert_eq!(perms.len(), 40_320);
        for p in perms {
            for dir in [SortDirection::ASCENDING, SortDirection::DESCENDING] {
                let mut s = slots(&p);
                let ces = bitonic_sort_records(&mut s, dir).unwrap();
                assert_eq!(ces, 24);
                let mut oracle: Vec<KvRecord> = p.iter().map(|&k| rec(k)).collect();
                oracle.sort();
                if !dir.ascending {
                    oracle.reverse();
                }
                assert_eq!(s.to_records(), oracle);
            }
        }
    }

    #[test]
    fn network_size_closed_form() {
        for (n, expect) in [(1u64, 0u64), (2, 1), (4, 6), (8, 24), (16, 80), (32, 240)] {
            assert_eq!(bitonic_network_size(n), expect);
            let mut s = RecordSlots::scratch(vec![0; n as usize * RS], RS);
            assert_eq!(
                bitonic_sort_records(&mut s, SortDirection::ASCENDING).unwrap(),
                expect
            );
        }
    }

    #[test]
    fn sorted_and_reversed_inputs_share_a_trace() {
        let up: Vec<u8> = (0..16).collect();
        let down: Vec<u8> = (0..16).rev().collect();
        let mut a = slots(&up);
        let mut b = slots(&down);
        let (_, ta) = capture(|| bitonic_sort_records(&mut a, SortDirection::ASCENDING)).unwrap();
        let (_, tb) = capture(|| bitonic_sort_records(&mut b, SortDirection::ASCENDING)).unwrap();
        assert_eq!(a.to_records(), b.to_records());
        assert_eq!(slots(&up).to_records(), a.to_records());
        assert_eq!(ta.first_divergence(&tb), None);
        assert_eq!(ta.len(), 80 * 4);
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        let mut s = slots(&[1, 2, 3]);
        assert!(matches!(
            bitonic_sort_records(&mut s, SortDirection::ASCENDING),
            Err(Error::NotPowerOfTwo(3))
        ));
    }

    #[test]
    fn merge_sorts_bitonic_input() {
        let mut s = slots(&[1, 4, 6, 9, 8, 5, 3, 2]);
        assert_eq!(
            bitonic_merge_records(&mut s, SortDirection::ASCENDING).unwrap(),
            12
        );
        let keys: Vec<u8> = s.to_records().iter().map(|r| r.key()[0]).collect();
        assert_eq!(keys, vec![1, 2, 3, 4, 5, 6, 8, 9]);
    }

    proptest! {
        #[test]
        fn bitonic_sort_is_a_sorting_permutation(keys in proptest::collection::vec(any::<u8>(), 32),
                                                 ascending in any::<bool>()) {
            let mut records: Vec<KvRecord> = keys.iter().map(|&k| rec(k)).collect();
            records[3] = KvRecord::dummy(RS);
            let mut s = RecordSlots::from_records(&records);
            bitonic_sort_records(&mut s, SortDirection { ascending }).unwrap();
            records.sort();
            if !ascending {
                records.reverse();
            }
            prop_assert_eq!(s.to_records(), records);
        }
    }
}
