//! Benchmark scenarios reported as access counts plus wall time.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apps::{
    gaussian_points, initial_centroids, point_records, text_records, wordcount_config, zipf_corpus, KMeans,
    WordCount, TEXT_RECORD_SIZE,
};
use crate::baseline::run_oram_baseline;
use crate::block_store::{BlockFileMeta, FileId, Location, UntrustedStore};
use crate::enclave::{Enclave, PlainBlock, SealKey};
use crate::engine::{pad_to_power_of_two, run_job, JobConfig, MapFunction};
use crate::error::{Error, Result};
use crate::oram::{oram_scan, OramState, DEFAULT_Z};
use crate::record::{KvRecord, KEY_LEN};
use crate::sort::{bitonic_sort_blocks, merge_sort_blocks, SortOptions};
use crate::trace::{capture, capture_counts, trace_stats, TraceStats};

pub const SCENARIOS: &[&str] = &[
    "seq-scan",
    "oram-scan",
    "bitonic-sort",
    "merge-sort",
    "bitonic+oswap",
    "wordcount-sgxmr",
    "wordcount-oram-baseline",
    "kmeans-sgxmr",
    "kmeans-oram-baseline",
];

pub const CSV_HEADER: &str =
    "scenario,blocks,block_size,untrusted_reads,untrusted_writes,enclave_record_touches,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub blocks: u64,
    pub block_size: usize,
    pub untrusted_reads: u64,
    pub untrusted_writes: u64,
    pub enclave_record_touches: u64,
    pub wall_ms: f64,
}

impl BenchRow {
    fn new(scenario: &str, blocks: u64, block_size: usize, stats: &TraceStats, wall_ms: f64) -> Self {
        BenchRow {
            scenario: scenario.to_string(),
            blocks,
            block_size,
            untrusted_reads: stats.untrusted_block_reads(),
            untrusted_writes: stats.untrusted_block_writes(),
            enclave_record_touches: stats.enclave_record_touches(),
            wall_ms,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.scenario,
            self.blocks,
            self.block_size,
            self.untrusted_reads,
            self.untrusted_writes,
            self.enclave_record_touches,
            self.wall_ms
        )
    }

    pub fn untrusted_touches(&self) -> u64 {
        self.untrusted_reads + self.untrusted_writes
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn row(&self, scenario: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }

    /// Untrusted touches of `slow` divided by those of `fast`.
    pub fn touch_ratio(&self, slow: &str, fast: &str) -> Option<f64> {
        let (s, f) = (self.row(slow)?, self.row(fast)?);
        Some(s.untrusted_touches() as f64 / f.untrusted_touches().max(1) as f64)
    }
}

const BENCH_KEY: [u8; 16] = [0x42; 16];

fn key() -> SealKey {
    SealKey::new(BENCH_KEY)
}

thread_local! {
    /// Record full traces instead of counts; lets tests reconcile the two.
    static FULL_TRACE: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn timed<R>(f: impl FnOnce() -> R) -> Result<(R, TraceStats, f64)> {
    let start = Instant::now();
    let (r, stats) = if FULL_TRACE.with(|c| c.get()) {
        let (r, t) = capture(f)?;
        (r, trace_stats(&t))
    } else {
        capture_counts(f)?
    };
    Ok((r, stats, start.elapsed().as_secs_f64() * 1e3))
}

fn random_file(store: &mut UntrustedStore, blocks: u64, block_size: usize, seed: u64) -> Result<FileId> {
    let meta = BlockFileMeta::for_block_size(block_size, 32)?;
    let f = store.create_file(meta, Location::Memory)?;
    let mut enc = Enclave::new(&key(), 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..blocks {
        let mut b = PlainBlock::dummy(f.0, i, &meta);
        for r in 0..meta.records_per_block {
            let k: [u8; 8] = rng.gen();
            let rec = KvRecord::new(&k, &[], meta.record_size)?;
            b.record_mut(r).copy_from_slice(rec.as_bytes());
        }
        enc.store(store, &b)?;
    }
    Ok(f)
}

/// Input blocks for the application scenarios, as plaintext payloads.
struct AppInput {
    meta: BlockFileMeta,
    records: Vec<KvRecord>,
}

impl AppInput {
    fn seal(&self, store: &mut UntrustedStore) -> Result<FileId> {
        crate::apps::encode_records(
            store,
            &key(),
            self.meta,
            Location::Memory,
            self.records.iter().cloned(),
        )
    }

    fn payloads(&self) -> Vec<Vec<u8>> {
        self.records
            .chunks(self.meta.records_per_block)
            .map(|c| {
                let mut b = PlainBlock::dummy(0, 0, &self.meta);
                for (i, r) in c.iter().enumerate() {
                    b.record_mut(i).copy_from_slice(r.as_bytes());
                }
                b.data().to_vec()
            })
            .collect()
    }
}

fn wordcount_input(blocks: u64, block_size: usize, seed: u64) -> Result<(AppInput, JobConfig, WordCount)> {
    let meta = BlockFileMeta::for_block_size(block_size, TEXT_RECORD_SIZE)?;
    let tokens = blocks as usize * meta.records_per_block;
    let text = zipf_corpus(tokens, 10_000, 1.0, seed).join(" ");
    let records = text_records(&text, meta.record_size)?;
    Ok((
        AppInput { meta, records },
        wordcount_config(key(), block_size),
        WordCount::default(),
    ))
}

fn kmeans_input(blocks: u64, block_size: usize, seed: u64) -> Result<(AppInput, JobConfig, KMeans)> {
    let probe = KMeans::new(vec![crate::apps::Centroid {
        cluster_id: 0,
        coordinates: vec![0.0; 2],
    }])?;
    let meta = probe.input_meta(block_size)?;
    let n = blocks as usize * meta.records_per_block;
    let pts = gaussian_points(n, 5, 2, seed);
    let km = KMeans::new(initial_centroids(&pts, 5))?;
    let cfg = km.config(key(), block_size)?;
    let records = point_records(&pts, meta.record_size)?;
    Ok((AppInput { meta, records }, cfg, km))
}

fn sgxmr_row(
    name: &str,
    blocks: u64,
    block_size: usize,
    input: AppInput,
    cfg: JobConfig,
    map: &dyn MapFunction,
) -> Result<BenchRow> {
    let mut store = UntrustedStore::new();
    let f = input.seal(&mut store)?;
    let (r, stats, ms) = timed(|| run_job(&cfg, map, &mut store, f))?;
    r?;
    Ok(BenchRow::new(name, blocks, block_size, &stats, ms))
}

fn oram_row(
    name: &str,
    blocks: u64,
    block_size: usize,
    input: AppInput,
    cfg: JobConfig,
    map: &dyn MapFunction,
    seed: u64,
) -> Result<BenchRow> {
    let payloads = input.payloads();
    let (r, stats, ms) = timed(|| run_oram_baseline(&cfg, map, input.meta, &payloads, seed))?;
    r?;
    Ok(BenchRow::new(name, blocks, block_size, &stats, ms))
}

/// Run one named scenario over `blocks` blocks of `block_size` bytes.
pub fn run_scenario(name: &str, blocks: u64, block_size: usize, seed: u64) -> Result<BenchRow> {
    if block_size < 2 * (KEY_LEN + 16) {
        return Err(Error::InvalidMeta(format!(
            "block size {block_size} too small for benchmarks"
        )));
    }
    match name {
        "seq-scan" => {
            let mut store = UntrustedStore::new();
            let f = random_file(&mut store, blocks, block_size, seed)?;
            let mut enc = Enclave::new(&key(), 2)?;
            let (r, stats, ms) = timed(|| -> Result<()> {
                for i in 0..blocks {
                    enc.fetch(&mut store, f, i)?;
                }
                Ok(())
            })?;
            r?;
            Ok(BenchRow::new(name, blocks, block_size, &stats, ms))
        }
        "oram-scan" => {
            let mut oram = OramState::new(blocks.max(1), DEFAULT_Z, block_size, seed)?;
            let (r, stats, ms) = timed(|| oram_scan(&mut oram, blocks))?;
            r?;
            Ok(BenchRow::new(name, blocks, block_size, &stats, ms))
        }
        "bitonic-sort" | "bitonic+oswap" | "merge-sort" => {
            let mut store = UntrustedStore::new();
            let f = random_file(&mut store, blocks, block_size, seed)?;
            let mut enc = Enclave::new(&key(), 3)?;
            pad_to_power_of_two(&mut enc, &mut store, f)?;
            let opts = SortOptions {
                oblivious_swap: name == "bitonic+oswap",
                ..SortOptions::default()
            };
            let (r, stats, ms) = timed(|| {
                if name == "merge-sort" {
                    merge_sort_blocks(&mut enc, &mut store, f, SortOptions::default())
                } else {
                    bitonic_sort_blocks(&mut enc, &mut store, f, opts)
                }
            })?;
            r?;
            Ok(BenchRow::new(name, blocks, block_size, &stats, ms))
        }
        "wordcount-sgxmr" => {
            let (input, cfg, map) = wordcount_input(blocks, block_size, seed)?;
            sgxmr_row(name, blocks, block_size, input, cfg, &map)
        }
        "wordcount-oram-baseline" => {
            let (input, cfg, map) = wordcount_input(blocks, block_size, seed)?;
            oram_row(name, blocks, block_size, input, cfg, &map, seed)
        }
        "kmeans-sgxmr" => {
            let (input, cfg, map) = kmeans_input(blocks, block_size, seed)?;
            sgxmr_row(name, blocks, block_size, input, cfg, &map)
        }
        "kmeans-oram-baseline" => {
            let (input, cfg, map) = kmeans_input(blocks, block_size, seed)?;
            oram_row(name, blocks, block_size, input, cfg, &map, seed)
        }
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// Run every scenario in `names`, in order.
pub fn bench(names: &[&str], blocks: u64, block_size: usize, seed: u64) -> Result<BenchReport> {
    let rows = names
        .iter()
        .map(|n| run_scenario(n, blocks, block_size, seed))
        .collect::<Result<_>>()?;
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_scan_counts() {
        let r = run_scenario("seq-scan", 300, 1024, 1).unwrap();
        assert_eq!((r.untrusted_reads, r.untrusted_writes), (300, 0));
    }

    #[test]
    fn bitonic_counts_follow_closed_form() {
        let r = run_scenario("bitonic+oswap", 64, 512, 1).unwrap();
        let pairs = 64 * 6 * 7 / 4;
        assert_eq!((r.untrusted_reads, r.untrusted_writes), (2 * pairs, 2 * pairs));
        let plain = run_scenario("bitonic-sort", 64, 512, 1).unwrap();
        assert_eq!(plain.untrusted_reads, r.untrusted_reads);
        assert!(plain.enclave_record_touches < r.enclave_record_touches);
    }

    #[test]
    fn counts_reconcile_with_full_traces() {
        for name in SCENARIOS {
            let counted = run_scenario(name, 4, 512, 3).unwrap();
            FULL_TRACE.with(|c| c.set(true));
            let traced = run_scenario(name, 4, 512, 3);
            FULL_TRACE.with(|c| c.set(false));
            let traced = traced.unwrap();
            assert_eq!(
                (
                    counted.untrusted_reads,
                    counted.untrusted_writes,
                    counted.enclave_record_touches
                ),
                (
                    traced.untrusted_reads,
                    traced.untrusted_writes,
                    traced.enclave_record_touches
                ),
                "{name}"
            );
        }
    }

    #[test]
    fn every_scenario_runs_and_csv_has_one_row_each() {
        let report = bench(SCENARIOS, 8, 512, 2).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), SCENARIOS.len() + 1);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(
            report
                .touch_ratio("wordcount-oram-baseline", "wordcount-sgxmr")
                .unwrap()
                > 1.0
        );
        assert!(matches!(
            run_scenario("nope", 1, 512, 0),
            Err(Error::UnknownScenario(_))
        ));
    }
}
