//! The regulated MapReduce dataflow.
//!
//! A job runs four phases in a fixed order, each reading one block file and
//! writing a fresh one:
//!
//! * `map`: scan the input sequentially, stage a fixed number of output slots
//!   per input record, and when a block fills, sort it and fold equal keys
//!   together (the combiner);
//! * `sort`: pad to a power-of-two block count and sort across blocks;
//! * `reduce`: one sequential pass writing exactly one record per input
//!   record, the group aggregate at a group's last record and a dummy
//!   elsewhere;
//! * `post_process`: sort the padded output again and cut it down to the
//!   blocks that hold real aggregates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::aggregate::AggregatorKind;
use crate::block_store::{BlockFileMeta, FileId, Location, UntrustedStore};
use crate::enclave::{touch_record, Enclave, PlainBlock, SealKey, Slot};
use crate::error::{Error, Result};
use crate::oblivious::{RecordSlots, SortDirection};
use crate::record::{ct_assign, ct_eq, ct_less, is_dummy, write_dummy, KvRecord, DUMMY_KEY, KEY_LEN};
use crate::sort::{bitonic_sort_blocks, merge_sort_blocks, sort_block, SortOptions};
use crate::trace::{self, AccessOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PaddingMode {
    /// Reducers write only real aggregates. Leaks group sizes.
    None,
    /// Reducers write one record per input record.
    PadOnly,
    /// Padded reduce followed by a compaction sort.
    #[default]
    PadThenPostprocess,
}

impl FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(PaddingMode::None),
            "pad_only" => Ok(PaddingMode::PadOnly),
            "pad_then_postprocess" => Ok(PaddingMode::PadThenPostprocess),
            other => Err(Error::Config(format!("unknown padding mode {other:?}"))),
        }
    }
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaddingMode::None => "none",
            PaddingMode::PadOnly => "pad_only",
            PaddingMode::PadThenPostprocess => "pad_then_postprocess",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SortKind {
    #[default]
    Bitonic,
    /// Leaky baseline, for demonstrations and cost comparison.
    Merge,
}

impl FromStr for SortKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bitonic" => Ok(SortKind::Bitonic),
            "merge" => Ok(SortKind::Merge),
            other => Err(Error::Config(format!("unknown sort {other:?}"))),
        }
    }
}

impl fmt::Display for SortKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SortKind::Bitonic => "bitonic",
            SortKind::Merge => "merge",
        })
    }
}

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub block_size: usize,
    /// Minimum bytes per intermediate record; rounded up to fill the block.
    pub record_size: usize,
    pub aggregator: AggregatorKind,
    pub padding: PaddingMode,
    pub buffer_capacity: usize,
    pub seal_key: SealKey,
    pub sort: SortKind,
    /// Fold equal keys inside each map output block. Always on outside tests.
    pub combiner: bool,
}

impl JobConfig {
    pub const MIN_BUFFER: usize = 3;

    pub fn new(seal_key: SealKey) -> Self {
        JobConfig {
            block_size: 2048,
            record_size: 64,
            aggregator: AggregatorKind::Count,
            padding: PaddingMode::default(),
            buffer_capacity: 4,
            seal_key,
            sort: SortKind::default(),
            combiner: true,
        }
    }

    /// Geometry of every intermediate file.
    pub fn meta(&self) -> Result<BlockFileMeta> {
        BlockFileMeta::for_block_size(self.block_size, self.record_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_capacity < Self::MIN_BUFFER {
            return Err(Error::BufferCapacity(self.buffer_capacity));
        }
        let meta = self.meta()?;
        self.aggregator.check_width(meta.record_size - KEY_LEN)
    }

    /// Parse `key = value` lines; `#` starts a comment. Keys the engine does
    /// not know are handed back for the caller to interpret.
    pub fn parse(text: &str) -> Result<(JobConfig, BTreeMap<String, String>)> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let key = kv
            .remove("key_hex")
            .ok_or_else(|| Error::Config("key_hex is required".into()))?;
        let mut cfg = JobConfig::new(SealKey::from_hex(&key)?);
        let num = |k: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{k}: not a number: {v:?}")))
        };
        if let Some(v) = kv.remove("block_size") {
            cfg.block_size = num("block_size", &v)?;
        }
        if let Some(v) = kv.remove("record_size") {
            cfg.record_size = num("record_size", &v)?;
        }
        if let Some(v) = kv.remove("buffer_capacity") {
            cfg.buffer_capacity = num("buffer_capacity", &v)?;
        }
        if let Some(v) = kv.remove("aggregator") {
            cfg.aggregator = v.parse()?;
        }
        if let Some(v) = kv.remove("padding") {
            cfg.padding = v.parse()?;
        }
        if let Some(v) = kv.remove("sort") {
            cfg.sort = v.parse()?;
        }
        cfg.validate()?;
        Ok((cfg, kv))
    }
}

/// Callback a map function hands each `(key, value)` pair to.
pub type Emit<'a> = dyn FnMut(&[u8], &[u8]) -> Result<()> + 'a;

/// A user map function. It must declare how many records it can emit for one
/// input record; the engine reserves exactly that many output slots per input
/// record so the map trace does not depend on what the function emits.
pub trait MapFunction {
    fn max_outputs(&self) -> usize;

    /// Emit `(key, value)` pairs for one real input record.
    fn map(&self, record: &[u8], emit: &mut Emit<'_>) -> Result<()>;
}

/// Streaming group fold shared by the combiner and the reducer.
///
/// Fed one record at a time with a one-record lookahead, it returns the
/// record to write in the current record's position: the accumulated group
/// aggregate if the current record ends its group, a dummy otherwise.
pub(crate) struct GroupFold<'a> {
    agg: &'a AggregatorKind,
    cur: Vec<u8>,
    acc: Vec<u8>,
    scratch: Vec<u8>,
    pub(crate) emitted: u64,
    pub(crate) unsorted: bool,
}

impl<'a> GroupFold<'a> {
    pub(crate) fn new(agg: &'a AggregatorKind, first: &[u8]) -> Self {
        GroupFold {
            agg,
            cur: first.to_vec(),
            acc: first.to_vec(),
            scratch: first.to_vec(),
            emitted: 0,
            unsorted: false,
        }
    }

    /// `next` is `None` only at the last position, which is public.
    pub(crate) fn step(&mut self, next: Option<&[u8]>, out: &mut [u8]) -> bool {
        let ends = match next {
            Some(nx) => !ct_eq(&nx[..KEY_LEN], &self.cur[..KEY_LEN]),
            None => true,
        };
        let real = !ct_eq(&self.cur[..KEY_LEN], &DUMMY_KEY);
        let emit = ends & real;
        write_dummy(out);
        ct_assign(emit, out, &self.acc);
        self.emitted += emit as u64;
        if let Some(nx) = next {
            self.unsorted |= ct_less(&nx[..KEY_LEN], &self.cur[..KEY_LEN]);
            // scratch := same group ? acc ⊕ next : next
            self.agg.combine(&mut self.acc[KEY_LEN..], &nx[KEY_LEN..]);
            self.scratch.copy_from_slice(nx);
            ct_assign(!ends, &mut self.scratch, &self.acc);
            std::mem::swap(&mut self.acc, &mut self.scratch);
            self.cur.copy_from_slice(nx);
        }
        emit
    }
}

/// Fold equal-key neighbours of a sorted slot array in one pass. Slot `i` is
/// written exactly once, after slot `i + 1` has been read. Returns the number
/// of real aggregates left.
pub fn combine_sorted(slots: &mut RecordSlots, agg: &AggregatorKind) -> u64 {
    let m = slots.len();
    if m == 0 {
        return 0;
    }
    let mut fold = GroupFold::new(agg, slots.read(0));
    let mut out = vec![0u8; slots.record_size()];
    let mut next = vec![0u8; slots.record_size()];
    for i in 0..m {
        let has_next = i + 1 < m;
        if has_next {
            next.copy_from_slice(slots.read(i + 1));
        }
        fold.step(has_next.then_some(&next[..]), &mut out);
        slots.write(i, &out);
    }
    fold.emitted
}

fn sort_opts() -> SortOptions {
    SortOptions {
        direction: SortDirection::ASCENDING,
        oblivious_swap: true,
    }
}

fn finish_map_block(
    config: &JobConfig,
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    slot: Slot,
) -> Result<()> {
    if config.combiner {
        let block = enclave.block_mut(slot);
        sort_block(block, sort_opts())?;
        let data = block.data().to_vec();
        let mut slots = RecordSlots::new(data, block.record_size(), block.file_id, block.block_id);
        combine_sorted(&mut slots, &config.aggregator);
        block.data_mut().copy_from_slice(&slots.into_data());
        sort_block(block, sort_opts())?;
    }
    enclave.flush(store, slot)
}

/// Map and combine. Reads `input` front to back once; writes a new file of
/// `ceil(records × max_outputs / records_per_block)` blocks.
pub fn map_phase(
    config: &JobConfig,
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    map_fn: &dyn MapFunction,
    input: FileId,
) -> Result<FileId> {
    trace::set_phase("map");
    let in_meta = store.meta(input)?;
    let meta = config.meta()?;
    let out = store.create_file(meta, Location::Memory)?;
    let fan_out = map_fn.max_outputs();
    if fan_out == 0 {
        return Err(Error::Config("map function declares zero outputs".into()));
    }
    let m = meta.records_per_block;
    let mut staged: Vec<KvRecord> = Vec::with_capacity(fan_out);
    let mut pending: Option<(Slot, usize)> = None;
    let mut out_index = 0u64;
    for b in 0..in_meta.block_count {
        let input_slot = enclave.load(store, input, b)?;
        for r in 0..in_meta.records_per_block {
            let block = enclave.block(input_slot);
            touch_record(block, r, AccessOp::Read)?;
            let rec = block.record(r);
            staged.clear();
            if !is_dummy(rec) {
                map_fn.map(rec, &mut |k, v| {
                    if staged.len() == fan_out {
                        return Err(Error::MapOverflow(format!(
                            "more than {fan_out} outputs for one record"
                        )));
                    }
                    let kv = KvRecord::new(k, v, meta.record_size)
                        .map_err(|e| Error::MapOverflow(e.to_string()))?;
                    staged.push(kv);
                    Ok(())
                })?;
            }
            for j in 0..fan_out {
                let (slot, pos) = match pending {
                    Some(p) => p,
                    None => {
                        let blank = PlainBlock::dummy(out.0, out_index, &meta);
                        (enclave.insert(store, blank)?, 0)
                    }
                };
                let ob = enclave.block_mut(slot);
                match staged.get(j) {
                    Some(kv) => ob.record_mut(pos).copy_from_slice(kv.as_bytes()),
                    None => write_dummy(ob.record_mut(pos)),
                }
                touch_record(ob, pos, AccessOp::Write)?;
                if pos + 1 == m {
                    finish_map_block(config, enclave, store, slot)?;
                    out_index += 1;
                    pending = None;
                } else {
                    pending = Some((slot, pos + 1));
                }
            }
        }
        enclave.release(input_slot);
    }
    if let Some((slot, _)) = pending {
        finish_map_block(config, enclave, store, slot)?;
    }
    Ok(out)
}

/// Append all-dummy blocks until the block count is a power of two.
pub fn pad_to_power_of_two(enclave: &mut Enclave, store: &mut UntrustedStore, file: FileId) -> Result<u64> {
    let meta = store.meta(file)?;
    let n = meta.block_count;
    if n == 0 {
        return Ok(0);
    }
    let target = n.next_power_of_two();
    for i in n..target {
        enclave.store(store, &PlainBlock::dummy(file.0, i, &meta))?;
    }
    Ok(target - n)
}

pub fn sort_phase(
    config: &JobConfig,
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    intermediate: FileId,
) -> Result<FileId> {
    trace::set_phase("sort");
    pad_to_power_of_two(enclave, store, intermediate)?;
    let (out, _) = match config.sort {
        SortKind::Bitonic => bitonic_sort_blocks(enclave, store, intermediate, sort_opts())?,
        SortKind::Merge => merge_sort_blocks(enclave, store, intermediate, sort_opts())?,
    };
    Ok(out)
}

/// One sequential pass over a key-sorted file.
///
/// With `pad` set, output block `b` is written right after input block `b` is
/// consumed and holds one record per input record. Without it, only real
/// aggregates are written, which makes the write pattern follow the group
/// structure. Returns the output file and the number of real aggregates.
pub fn reduce_phase(
    config: &JobConfig,
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    sorted: FileId,
    pad: bool,
) -> Result<(FileId, u64)> {
    trace::set_phase("reduce");
    let meta = store.meta(sorted)?;
    let n = meta.block_count;
    let m = meta.records_per_block as u64;
    let out = store.create_file(meta, Location::Memory)?;
    if n == 0 {
        return Ok((out, 0));
    }
    let blank = |i: u64| PlainBlock::dummy(out.0, i, &meta);

    let mut cur_slot = enclave.load(store, sorted, 0)?;
    let first = {
        let b = enclave.block(cur_slot);
        touch_record(b, 0, AccessOp::Read)?;
        b.record(0).to_vec()
    };
    let mut fold = GroupFold::new(&config.aggregator, &first);
    let mut out_slot = Some(enclave.insert(store, blank(0))?);
    let mut out_index = 0u64;
    let mut out_pos = 0usize;
    let mut rec = vec![0u8; meta.record_size];
    let mut next = vec![0u8; meta.record_size];
    let total = n * m;
    for g in 0..total {
        let r = (g % m) as usize;
        let mut next_slot = None;
        let has_next = g + 1 < total;
        if has_next {
            let (nb, nr) = ((g + 1) / m, ((g + 1) % m) as usize);
            let s = if nr == 0 {
                let s = enclave.load(store, sorted, nb)?;
                next_slot = Some(s);
                s
            } else {
                cur_slot
            };
            let b = enclave.block(s);
            touch_record(b, nr, AccessOp::Read)?;
            next.copy_from_slice(b.record(nr));
        }
        let emit = fold.step(has_next.then_some(&next[..]), &mut rec);
        if pad || emit {
            let slot = match out_slot {
                Some(s) => s,
                None => {
                    let s = enclave.insert(store, blank(out_index))?;
                    out_slot = Some(s);
                    s
                }
            };
            let pos = if pad { r } else { out_pos };
            let ob = enclave.block_mut(slot);
            ob.record_mut(pos).copy_from_slice(&rec);
            touch_record(ob, pos, AccessOp::Write)?;
            out_pos = pos + 1;
            if out_pos == m as usize {
                enclave.flush(store, slot)?;
                out_slot = None;
                out_index += 1;
                out_pos = 0;
            }
        }
        if let Some(s) = next_slot {
            enclave.release(cur_slot);
            cur_slot = s;
        }
    }
    enclave.release(cur_slot);
    if let Some(slot) = out_slot {
        if out_pos > 0 {
            enclave.flush(store, slot)?;
        } else {
            enclave.release(slot);
        }
    }
    if fold.unsorted {
        return Err(Error::UnsortedInput);
    }
    Ok((out, fold.emitted))
}

/// Sort the padded reduce output so real aggregates come first, then drop
/// every block past the last one holding a real aggregate.
pub fn post_process(
    enclave: &mut Enclave,
    store: &mut UntrustedStore,
    padded: FileId,
    real_records: u64,
) -> Result<FileId> {
    trace::set_phase("post_process");
    pad_to_power_of_two(enclave, store, padded)?;
    let (sorted, _) = bitonic_sort_blocks(enclave, store, padded, sort_opts())?;
    let m = store.meta(sorted)?.records_per_block as u64;
    store.truncate(sorted, real_records.div_ceil(m))?;
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobOutcome {
    pub output: FileId,
    pub real_records: u64,
    pub map_output: FileId,
    pub sorted: FileId,
    pub reduced: FileId,
}

/// Run a whole job inside a fresh enclave. Intermediate files stay in `store`.
pub fn run_job(
    config: &JobConfig,
    map_fn: &dyn MapFunction,
    store: &mut UntrustedStore,
    input: FileId,
) -> Result<JobOutcome> {
    config.validate()?;
    let mut enclave = Enclave::new(&config.seal_key, config.buffer_capacity)?;
    let map_output = map_phase(config, &mut enclave, store, map_fn, input)?;
    let sorted = sort_phase(config, &mut enclave, store, map_output)?;
    let pad = config.padding != PaddingMode::None;
    let (reduced, real_records) = reduce_phase(config, &mut enclave, store, sorted, pad)?;
    let output = match config.padding {
        PaddingMode::PadThenPostprocess => post_process(&mut enclave, store, reduced, real_records)?,
        _ => reduced,
    };
    Ok(JobOutcome {
        output,
        real_records,
        map_output,
        sorted,
        reduced,
    })
}

/// Decrypt a whole file and return its real records in storage order.
pub fn read_records(store: &mut UntrustedStore, key: &SealKey, file: FileId) -> Result<Vec<KvRecord>> {
    let mut enclave = Enclave::new(key, crate::enclave::EnclaveBuffer::MIN_CAPACITY)?;
    let n = store.block_count(file)?;
    let mut out = vec![];
    for i in 0..n {
        let b = enclave.fetch(store, file, i)?;
        out.extend(b.real_records().map(KvRecord::from_bytes));
    }
    Ok(out)
}

/// Plaintext reference: fold every emitted value per key.
pub fn reference_mapreduce(
    map_fn: &dyn MapFunction,
    records: &[Vec<u8>],
    aggregator: &AggregatorKind,
    record_size: usize,
) -> Result<BTreeMap<Vec<u8>, Vec<u8>>> {
    let mut groups: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    for rec in records {
        if is_dummy(rec) {
            continue;
        }
        map_fn.map(rec, &mut |k, v| {
            let kv = KvRecord::new(k, v, record_size)?;
            match groups.get_mut(kv.key()) {
                Some(acc) => aggregator.combine(acc, kv.value()),
                None => {
                    groups.insert(kv.key().to_vec(), kv.value().to_vec());
                }
            }
            Ok(())
        })?;
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{capture, compare_traces, trace_stats};

    const KEY: [u8; 16] = [9; 16];
    const RS: usize = KEY_LEN + 8;

    /// Input records carry their output key in the value field.
    struct Echo;

    impl MapFunction for Echo {
        fn max_outputs(&self) -> usize {
            1
        }

        fn map(&self, record: &[u8], emit: &mut Emit<'_>) -> Result<()> {
            let v = &record[KEY_LEN..];
            let end = v.iter().position(|&b| b == 0).unwrap_or(v.len());
            if end > 0 {
                emit(&v[..end], &1u64.to_le_bytes())?;
            }
            Ok(())
        }
    }

    fn config(rpb: usize) -> JobConfig {
        let mut c = JobConfig::new(SealKey::new(KEY));
        c.record_size = RS;
        c.block_size = RS * rpb;
        c
    }

    fn input(store: &mut UntrustedStore, words: &[&str], rpb: usize) -> FileId {
        let meta = BlockFileMeta::new(RS, rpb).unwrap();
        let f = store.create_file(meta, Location::Memory).unwrap();
        let mut enc = Enclave::new(&SealKey::new(KEY), 2).unwrap();
        for (i, chunk) in words.chunks(rpb).enumerate() {
            let mut b = PlainBlock::dummy(f.0, i as u64, &meta);
            for (r, w) in chunk.iter().enumerate() {
                let rec = KvRecord::new(&(i * rpb + r).to_be_bytes(), w.as_bytes(), RS).unwrap();
                b.record_mut(r).copy_from_slice(rec.as_bytes());
            }
            enc.store(store, &b).unwrap();
        }
        f
    }

    fn counts(store: &mut UntrustedStore, f: FileId) -> Vec<(String, u64)> {
        read_records(store, &SealKey::new(KEY), f)
            .unwrap()
            .iter()
            .map(|r| {
                let k = r.key();
                let end = k.iter().position(|&b| b == 0).unwrap_or(KEY_LEN);
                (
                    String::from_utf8_lossy(&k[..end]).into_owned(),
                    u64::from_le_bytes(r.value()[..8].try_into().unwrap()),
                )
            })
            .collect()
    }

    #[test]
    fn a_b_a() {
        let mut store = UntrustedStore::new();
        let f = input(&mut store, &["a", "b", "a"], 4);
        let out = run_job(&config(4), &Echo, &mut store, f).unwrap();
        assert_eq!(
            counts(&mut store, out.output),
            vec![("a".into(), 2), ("b".into(), 1)]
        );
        assert_eq!(out.real_records, 2);
    }

    #[test]
    fn combiner_on_b_a_b_a() {
        let mut store = UntrustedStore::new();
        let f = input(&mut store, &["b", "a", "b", "a"], 4);
        let cfg = config(4);
        let mut enc = Enclave::new(&cfg.seal_key, 3).unwrap();
        let mapped = map_phase(&cfg, &mut enc, &mut store, &Echo, f).unwrap();
        assert_eq!(store.block_count(mapped).unwrap(), 1);
        let b = enc.fetch(&mut store, mapped, 0).unwrap();
        let recs: Vec<KvRecord> = b.records().map(KvRecord::from_bytes).collect();
        assert_eq!(recs[0].key()[0], b'a');
        assert_eq!(recs[1].key()[0], b'b');
        assert_eq!(&recs[0].value()[..8], &2u64.to_le_bytes());
        assert_eq!(&recs[1].value()[..8], &2u64.to_le_bytes());
        assert!(recs[2].is_dummy() && recs[3].is_dummy());
    }

    fn sorted_file(store: &mut UntrustedStore, keys: &[&str], rpb: usize) -> FileId {
        let meta = BlockFileMeta::new(RS, rpb).unwrap();
        let f = store.create_file(meta, Location::Memory).unwrap();
        let mut enc = Enclave::new(&SealKey::new(KEY), 2).unwrap();
        for (i, chunk) in keys.chunks(rpb).enumerate() {
            let mut b = PlainBlock::dummy(f.0, i as u64, &meta);
            for (r, k) in chunk.iter().enumerate() {
                if !k.is_empty() {
                    let rec = KvRecord::new(k.as_bytes(), &1u64.to_le_bytes(), RS).unwrap();
                    b.record_mut(r).copy_from_slice(rec.as_bytes());
                }
            }
            enc.store(store, &b).unwrap();
        }
        f
    }

    #[test]
    fn reduce_pads_groups_3_2_3() {
        let mut traces = vec![];
        for keys in [
            ["a", "a", "a", "b", "b", "c", "c", "c"],
            ["a", "b", "b", "b", "b", "b", "c", "c"],
        ] {
            let mut store = UntrustedStore::new();
            let f = sorted_file(&mut store, &keys, 4);
            let cfg = config(4);
            let mut enc = Enclave::new(&cfg.seal_key, 3).unwrap();
            let (r, t) = capture(|| reduce_phase(&cfg, &mut enc, &mut store, f, true)).unwrap();
            let (out, k) = r.unwrap();
            assert_eq!(k, 3);
            assert_eq!(store.block_count(out).unwrap(), 2);
            let all: Vec<_> = (0..2)
                .flat_map(|i| {
                    enc.fetch(&mut store, out, i)
                        .unwrap()
                        .records()
                        .map(KvRecord::from_bytes)
                        .collect::<Vec<_>>()
                })
                .collect();
            assert_eq!(all.len(), 8);
            assert_eq!(all.iter().filter(|r| !r.is_dummy()).count(), 3);
            if keys[1] == "a" {
                let got: Vec<_> = counts(&mut store, out);
                assert_eq!(got, vec![("a".into(), 3), ("b".into(), 2), ("c".into(), 3)]);
                assert!(!all[2].is_dummy() && !all[4].is_dummy() && !all[7].is_dummy());
            }
            let compact = post_process(&mut enc, &mut store, out, k).unwrap();
            assert_eq!(store.block_count(compact).unwrap(), 1);
            traces.push(t);
        }
        assert!(compare_traces(&traces).is_oblivious());
        let s = trace_stats(&traces[0]);
        assert_eq!(s.untrusted_block_reads(), 2);
        assert_eq!(s.untrusted_block_writes(), 2);
    }

    #[test]
    fn unpadded_reduce_leaks_group_structure() {
        let mut traces = vec![];
        for keys in [
            ["a", "a", "a", "b", "c", "d", "e", "f"],
            ["a", "b", "c", "d", "e", "f", "f", "f"],
        ] {
            let mut store = UntrustedStore::new();
            let f = sorted_file(&mut store, &keys, 4);
            let cfg = config(4);
            let mut enc = Enclave::new(&cfg.seal_key, 3).unwrap();
            let (r, t) = capture(|| reduce_phase(&cfg, &mut enc, &mut store, f, false)).unwrap();
            assert_eq!(r.unwrap().1, 6);
            traces.push(t);
        }
        assert!(!compare_traces(&traces).is_oblivious());
    }

    #[test]
    fn unsorted_reduce_input_aborts() {
        let mut store = UntrustedStore::new();
        let f = sorted_file(&mut store, &["b", "a", "c", "d"], 4);
        let cfg = config(4);
        let mut enc = Enclave::new(&cfg.seal_key, 3).unwrap();
        assert!(matches!(
            reduce_phase(&cfg, &mut enc, &mut store, f, true),
            Err(Error::UnsortedInput)
        ));
    }

    #[test]
    fn one_group_reduces_to_one_aggregate() {
        let mut store = UntrustedStore::new();
        let keys = ["k"; 16];
        let f = sorted_file(&mut store, &keys, 4);
        let cfg = config(4);
        let mut enc = Enclave::new(&cfg.seal_key, 3).unwrap();
        let (out, k) = reduce_phase(&cfg, &mut enc, &mut store, f, true).unwrap();
        assert_eq!(k, 1);
        assert_eq!(counts(&mut store, out), vec![("k".into(), 16)]);
        let compact = post_process(&mut enc, &mut store, out, k).unwrap();
        assert_eq!(store.block_count(compact).unwrap(), 1);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let mut store = UntrustedStore::new();
        let f = input(&mut store, &[], 4);
        let out = run_job(&config(4), &Echo, &mut store, f).unwrap();
        assert_eq!(store.block_count(out.output).unwrap(), 0);
        assert_eq!(out.real_records, 0);
    }

    #[test]
    fn silent_map_gives_all_dummy_blocks() {
        struct Silent;
        impl MapFunction for Silent {
            fn max_outputs(&self) -> usize {
                2
            }
            fn map(&self, _: &[u8], _: &mut Emit<'_>) -> Result<()> {
                Ok(())
            }
        }
        let mut store = UntrustedStore::new();
        let f = input(&mut store, &["x"; 6], 4);
        let cfg = config(4);
        let mut enc = Enclave::new(&cfg.seal_key, 3).unwrap();
        let mapped = map_phase(&cfg, &mut enc, &mut store, &Silent, f).unwrap();
        // 2 input blocks x 4 records x 2 slots = 16 slots
        assert_eq!(store.block_count(mapped).unwrap(), 4);
        assert!(read_records(&mut store, &cfg.seal_key, mapped)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn map_overflow_is_reported() {
        struct Greedy;
        impl MapFunction for Greedy {
            fn max_outputs(&self) -> usize {
                1
            }
            fn map(&self, _: &[u8], emit: &mut Emit<'_>) -> Result<()> {
                emit(b"a", &[1])?;
                emit(b"b", &[1])
            }
        }
        let mut store = UntrustedStore::new();
        let f = input(&mut store, &["x"], 4);
        assert!(matches!(
            run_job(&config(4), &Greedy, &mut store, f),
            Err(Error::MapOverflow(_))
        ));
    }

    #[test]
    fn phases_run_in_order() {
        let mut store = UntrustedStore::new();
        let f = input(&mut store, &["a", "b", "c", "a", "d"], 2);
        let (r, t) = capture(|| run_job(&config(2), &Echo, &mut store, f)).unwrap();
        r.unwrap();
        let names: Vec<String> = t.phases().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["map", "sort", "reduce", "post_process"]);
    }

    #[test]
    fn config_file_parsing() {
        let text = "# job\nblock_size = 1024\nrecord_size=32\naggregator = topk:2\npadding = pad_only\n\
                    buffer_capacity = 5\nsort = merge\nkey_hex = 000102030405060708090a0b0c0d0e0f\nk = 3\n";
        let (cfg, extra) = JobConfig::parse(text).unwrap();
        assert_eq!(cfg.block_size, 1024);
        assert_eq!(cfg.aggregator, AggregatorKind::TopK(2));
        assert_eq!(cfg.padding, PaddingMode::PadOnly);
        assert_eq!(cfg.sort, SortKind::Merge);
        assert_eq!(cfg.buffer_capacity, 5);
        assert_eq!(extra.get("k").map(String::as_str), Some("3"));
        assert!(JobConfig::parse("block_size = 1024").is_err());
        assert!(JobConfig::parse("key_hex = 00\n").is_err());
        let small = "buffer_capacity = 2\nkey_hex = 000102030405060708090a0b0c0d0e0f";
        assert!(matches!(JobConfig::parse(small), Err(Error::BufferCapacity(2))));
    }
}
