//! Oblivious MapReduce over sealed block storage.
//!
//! Storage lives in an [`UntrustedStore`] of AES-GCM sealed block files. The
//! [`Enclave`] holds the key and a small block buffer; everything it does to
//! blocks and records is reported to the [`trace`] recorder, which the
//! auditor uses to check that access patterns depend only on input shape.

pub mod aggregate;
pub mod apps;
pub mod baseline;
pub mod bench;
pub mod block_store;
pub mod enclave;
pub mod engine;
pub mod error;
pub mod oblivious;
pub mod oram;
pub mod record;
pub mod sort;
pub mod trace;

pub use aggregate::AggregatorKind;
pub use apps::{
    encode_points, encode_text, gaussian_points, initial_centroids, kmeans_reference, parse_points,
    word_counts, wordcount_config, wordcount_reference, zipf_corpus, Centroid, KMeans, WordCount,
};
pub use baseline::{run_oram_baseline, BaselineOutcome};
pub use bench::{run_scenario, BenchReport, BenchRow, SCENARIOS};
pub use block_store::{BlockFileMeta, BlockHeader, FileId, Location, SealedBlock, UntrustedStore};
pub use enclave::{touch_record, Enclave, EnclaveBuffer, PlainBlock, SealKey, Slot};
pub use engine::{
    map_phase, post_process, read_records, reduce_phase, run_job, sort_phase, Emit, JobConfig, JobOutcome,
    MapFunction, PaddingMode, SortKind,
};
pub use error::{Error, IntegrityError, Result};
pub use oblivious::{
    bitonic_merge_records, bitonic_network_size, bitonic_sort_records, o_select, RecordSlots, SortDirection,
};
pub use oram::{oram_access, oram_init, oram_scan, OramOp, OramState};
pub use record::{KvRecord, DUMMY_KEY, KEY_LEN};
pub use sort::{bitonic_sort_blocks, merge_sort_blocks, sort_block, SortOptions, SortStats};
pub use trace::{
    assert_oblivious, capture, capture_counts, compare_traces, trace_stats, AccessOp, Granularity,
    InputShape, Region, Trace, TraceEvent, TraceStats, Verdict,
};
