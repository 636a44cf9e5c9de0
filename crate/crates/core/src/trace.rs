//! Access-trace recording and obliviousness auditing.
//!
//! Every block transfer across the trusted boundary and every record access
//! inside the enclave is reported through [`emit`]. Nothing is recorded unless
//! a [`capture`] (or [`capture_counts`]) is active on the current thread, so
//! instrumentation never changes program results.
//!
//! Two traces are considered equal when their `(region, granularity, op,
//! address)` sequences match; ciphertexts and nonces never enter a trace.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Untrusted,
    Enclave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    Block,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessOp {
    Read,
    Write,
}

impl Region {
    fn as_str(self) -> &'static str {
        match self {
            Region::Untrusted => "untrusted",
            Region::Enclave => "enclave",
        }
    }
}

impl Granularity {
    fn as_str(self) -> &'static str {
        match self {
            Granularity::Block => "block",
            Granularity::Record => "record",
        }
    }
}

impl AccessOp {
    fn as_str(self) -> &'static str {
        match self {
            AccessOp::Read => "read",
            AccessOp::Write => "write",
        }
    }
}

/// One observed access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub region: Region,
    pub granularity: Granularity,
    pub op: AccessOp,
    pub file_id: u64,
    pub block_id: u64,
    pub record_index: Option<u32>,
    /// Index into the owning trace's phase label table.
    pub phase: u16,
}

impl TraceEvent {
    /// The part of an event an adversary can see.
    #[inline]
    pub fn observable(&self) -> (Region, Granularity, AccessOp, u64, u64, Option<u32>) {
        (
            self.region,
            self.granularity,
            self.op,
            self.file_id,
            self.block_id,
            self.record_index,
        )
    }

    fn kind(&self) -> usize {
        kind_index(self.region, self.granularity, self.op)
    }
}

#[inline]
fn kind_index(region: Region, granularity: Granularity, op: AccessOp) -> usize {
    (region as usize) << 2 | (granularity as usize) << 1 | op as usize
}

const KINDS: usize = 8;

/// An ordered access log plus the phase labels its events refer to.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub phase_labels: Vec<String>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn phase_of(&self, event: &TraceEvent) -> &str {
        self.phase_labels
            .get(event.phase as usize)
            .map(String::as_str)
            .unwrap_or("-")
    }

    /// Contiguous runs of events sharing a phase label, as `(label, start..end)`.
    pub fn phases(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out: Vec<(String, std::ops::Range<usize>)> = Vec::new();
        for (i, ev) in self.events.iter().enumerate() {
            let label = self.phase_of(ev);
            match out.last_mut() {
                Some((l, r)) if l == label => r.end = i + 1,
                _ => out.push((label.to_string(), i..i + 1)),
            }
        }
        out
    }

    /// Index of the first event at which the two traces differ observably,
    /// or `None` if they are identical.
    pub fn first_divergence(&self, other: &Trace) -> Option<usize> {
        let common = self.events.len().min(other.events.len());
        for i in 0..common {
            if self.events[i].observable() != other.events[i].observable() {
                return Some(i);
            }
        }
        (self.events.len() != other.events.len()).then_some(common)
    }

    /// Line-delimited export: `seq region granularity op file_id block_id [record_index] phase`.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for ev in &self.events {
            write!(
                w,
                "{} {} {} {} {} {}",
                ev.seq,
                ev.region.as_str(),
                ev.granularity.as_str(),
                ev.op.as_str(),
                ev.file_id,
                ev.block_id
            )?;
            if let Some(r) = ev.record_index {
                write!(w, " {r}")?;
            }
            writeln!(w, " {}", self.phase_of(ev))?;
        }
        Ok(())
    }

    pub fn parse_text<R: BufRead>(r: R) -> Result<Trace> {
        let mut trace = Trace::default();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::TraceParse {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 7 && tok.len() != 8 {
                return Err(bad("expected 7 or 8 fields"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer"));
            let region = match tok[1] {
                "untrusted" => Region::Untrusted,
                "enclave" => Region::Enclave,
                _ => return Err(bad("bad region")),
            };
            let granularity = match tok[2] {
                "block" => Granularity::Block,
                "record" => Granularity::Record,
                _ => return Err(bad("bad granularity")),
            };
            let op = match tok[3] {
                "read" => AccessOp::Read,
                "write" => AccessOp::Write,
                _ => return Err(bad("bad op")),
            };
            let record_index = if tok.len() == 8 {
                Some(tok[6].parse::<u32>().map_err(|_| bad("bad record index"))?)
            } else {
                None
            };
            let label = tok[tok.len() - 1];
            let phase = intern(&mut trace.phase_labels, label);
            trace.events.push(TraceEvent {
                seq: num(tok[0])?,
                region,
                granularity,
                op,
                file_id: num(tok[4])?,
                block_id: num(tok[5])?,
                record_index,
                phase,
            });
        }
        Ok(trace)
    }
}

fn intern(labels: &mut Vec<String>, label: &str) -> u16 {
    match labels.iter().position(|l| l == label) {
        Some(i) => i as u16,
        None => {
            labels.push(label.to_string());
            (labels.len() - 1) as u16
        }
    }
}

/// Event counts per `(region, granularity, op)`, overall and per phase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceStats {
    counts: [u64; KINDS],
    per_phase: BTreeMap<String, [u64; KINDS]>,
}

impl TraceStats {
    pub fn count(&self, region: Region, granularity: Granularity, op: AccessOp) -> u64 {
        self.counts[kind_index(region, granularity, op)]
    }

    pub fn phase_count(&self, phase: &str, region: Region, granularity: Granularity, op: AccessOp) -> u64 {
        self.per_phase
            .get(phase)
            .map_or(0, |c| c[kind_index(region, granularity, op)])
    }

    pub fn phases(&self) -> impl Iterator<Item = &str> {
        self.per_phase.keys().map(String::as_str)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn untrusted_block_reads(&self) -> u64 {
        self.count(Region::Untrusted, Granularity::Block, AccessOp::Read)
    }

    pub fn untrusted_block_writes(&self) -> u64 {
        self.count(Region::Untrusted, Granularity::Block, AccessOp::Write)
    }

    /// Record-granularity reads plus writes inside the enclave.
    pub fn enclave_record_touches(&self) -> u64 {
        self.count(Region::Enclave, Granularity::Record, AccessOp::Read)
            + self.count(Region::Enclave, Granularity::Record, AccessOp::Write)
    }

    fn add(&mut self, phase: &str, kind: usize) {
        self.counts[kind] += 1;
        match self.per_phase.get_mut(phase) {
            Some(c) => c[kind] += 1,
            None => {
                let mut c = [0; KINDS];
                c[kind] = 1;
                self.per_phase.insert(phase.to_string(), c);
            }
        }
    }
}

impl fmt::Display for TraceStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "untrusted reads={} writes={}, enclave record touches={}, total={}",
            self.untrusted_block_reads(),
            self.untrusted_block_writes(),
            self.enclave_record_touches(),
            self.total()
        )
    }
}

/// Exact per-kind and per-phase counts of a trace.
pub fn trace_stats(trace: &Trace) -> TraceStats {
    let mut stats = TraceStats::default();
    for ev in &trace.events {
        stats.add(trace.phase_of(ev), ev.kind());
    }
    stats
}

enum Sink {
    Events(Vec<TraceEvent>),
    Counts(Vec<[u64; KINDS]>),
}

struct Recorder {
    seq: u64,
    phase: u16,
    labels: Vec<String>,
    sink: Sink,
}

thread_local! {
    static RECORDER: RefCell<Option<Recorder>> = const { RefCell::new(None) };
}

static CAPTURE_LOCK: Mutex<()> = Mutex::new(());

/// Report one access. A no-op unless a capture is active on this thread.
#[inline]
pub fn emit(
    region: Region,
    granularity: Granularity,
    op: AccessOp,
    file_id: u64,
    block_id: u64,
    record_index: Option<u32>,
) {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            let seq = rec.seq;
            rec.seq += 1;
            match &mut rec.sink {
                Sink::Events(events) => events.push(TraceEvent {
                    seq,
                    region,
                    granularity,
                    op,
                    file_id,
                    block_id,
                    record_index,
                    phase: rec.phase,
                }),
                Sink::Counts(per_phase) => {
                    per_phase[rec.phase as usize][kind_index(region, granularity, op)] += 1
                }
            }
        }
    });
}

/// Label subsequent events with `label` until the next call.
pub fn set_phase(label: &str) {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            rec.phase = intern(&mut rec.labels, label);
            if let Sink::Counts(c) = &mut rec.sink {
                if c.len() < rec.labels.len() {
                    c.resize(rec.labels.len(), [0; KINDS]);
                }
            }
        }
    });
}

/// Whether a capture is active on the current thread.
pub fn is_capturing() -> bool {
    RECORDER.with(|r| r.borrow().is_some())
}

struct ActiveCapture<'a> {
    _lock: std::sync::MutexGuard<'a, ()>,
}

impl Drop for ActiveCapture<'_> {
    fn drop(&mut self) {
        RECORDER.with(|r| r.borrow_mut().take());
    }
}

fn begin(sink: Sink) -> Result<ActiveCapture<'static>> {
    if is_capturing() {
        return Err(Error::NestedCapture);
    }
    let lock = CAPTURE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    RECORDER.with(|r| {
        *r.borrow_mut() = Some(Recorder {
            seq: 0,
            phase: 0,
            labels: vec!["-".to_string()],
            sink,
        })
    });
    Ok(ActiveCapture { _lock: lock })
}

/// Run `program` and return its result together with the complete trace.
///
/// Only one capture may be active per process; concurrent callers wait.
/// A capture started from inside another fails with [`Error::NestedCapture`].
pub fn capture<R>(program: impl FnOnce() -> R) -> Result<(R, Trace)> {
    let guard = begin(Sink::Events(Vec::new()))?;
    let out = program();
    let rec = RECORDER
        .with(|r| r.borrow_mut().take())
        .expect("recorder vanished");
    drop(guard);
    let events = match rec.sink {
        Sink::Events(e) => e,
        Sink::Counts(_) => unreachable!(),
    };
    Ok((
        out,
        Trace {
            events,
            phase_labels: rec.labels,
        },
    ))
}

/// Like [`capture`], but keeps only the per-phase counts. Suitable for runs
/// with hundreds of millions of events.
pub fn capture_counts<R>(program: impl FnOnce() -> R) -> Result<(R, TraceStats)> {
    let guard = begin(Sink::Counts(vec![[0; KINDS]]))?;
    let out = program();
    let rec = RECORDER
        .with(|r| r.borrow_mut().take())
        .expect("recorder vanished");
    drop(guard);
    let mut stats = TraceStats::default();
    if let Sink::Counts(per_phase) = rec.sink {
        for (label, counts) in rec.labels.iter().zip(per_phase) {
            if counts.iter().all(|&c| c == 0) {
                continue;
            }
            for (k, c) in counts.iter().enumerate() {
                stats.counts[k] += c;
            }
            stats.per_phase.insert(label.clone(), counts);
        }
    }
    Ok((out, stats))
}

/// Dimensions that must agree before two runs' traces are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub block_count: u64,
    pub records_per_block: usize,
    pub record_size: usize,
}

/// Where two traces first disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    /// Indices into the input set of the two distinguishable inputs.
    pub witness: (usize, usize),
    /// Position of the first differing event.
    pub index: usize,
    pub left: Option<TraceEvent>,
    pub right: Option<TraceEvent>,
    /// Phase label of the divergent event in the first trace.
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Oblivious { runs: usize, events_per_run: usize },
    Distinguishable(Divergence),
}

impl Verdict {
    pub fn is_oblivious(&self) -> bool {
        matches!(self, Verdict::Oblivious { .. })
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Oblivious { runs, events_per_run } => write!(
                f,
                "oblivious: {runs} runs, {events_per_run} identical events each"
            ),
            Verdict::Distinguishable(d) => {
                let show = |e: &Option<TraceEvent>| match e {
                    Some(e) => format!(
                        "{} {} {} {}:{}{}",
                        e.region.as_str(),
                        e.granularity.as_str(),
                        e.op.as_str(),
                        e.file_id,
                        e.block_id,
                        e.record_index.map(|r| format!(":{r}")).unwrap_or_default()
                    ),
                    None => "<end of trace>".to_string(),
                };
                write!(
                    f,
                    "distinguishable: inputs #{} and #{} diverge at event {} (phase {}): {} vs {}",
                    d.witness.0,
                    d.witness.1,
                    d.index,
                    d.phase,
                    show(&d.left),
                    show(&d.right)
                )
            }
        }
    }
}

/// Compare already-captured traces. Every trace is checked against the first;
/// since equality is transitive this covers all pairs.
pub fn compare_traces(traces: &[Trace]) -> Verdict {
    let Some(first) = traces.first() else {
        return Verdict::Oblivious {
            runs: 0,
            events_per_run: 0,
        };
    };
    for (j, t) in traces.iter().enumerate().skip(1) {
        if let Some(d) = divergence(first, t, (0, j)) {
            return Verdict::Distinguishable(d);
        }
    }
    Verdict::Oblivious {
        runs: traces.len(),
        events_per_run: first.len(),
    }
}

fn divergence(a: &Trace, b: &Trace, witness: (usize, usize)) -> Option<Divergence> {
    a.first_divergence(b).map(|index| {
        let left = a.events.get(index).copied();
        Divergence {
            witness,
            index,
            left,
            right: b.events.get(index).copied(),
            phase: left
                .as_ref()
                .map(|e| a.phase_of(e).to_string())
                .unwrap_or_else(|| "-".to_string()),
        }
    })
}

/// Run `program` once per input under capture and check that all traces are
/// observably identical.
///
/// All inputs must report the same [`InputShape`]. Only the first trace is
/// retained while the others stream past, so large sweeps stay cheap.
pub fn assert_oblivious<I, R>(
    inputs: &[I],
    shape_of: impl Fn(&I) -> InputShape,
    mut program: impl FnMut(&I) -> Result<R>,
) -> Result<Verdict> {
    if let Some(first) = inputs.first() {
        let s0 = shape_of(first);
        for (i, input) in inputs.iter().enumerate().skip(1) {
            let s = shape_of(input);
            if s != s0 {
                return Err(Error::ShapeMismatch(format!(
                    "input #{i} has {s:?}, input #0 has {s0:?}"
                )));
            }
        }
    }
    let mut reference: Option<Trace> = None;
    for (j, input) in inputs.iter().enumerate() {
        let (out, trace) = capture(|| program(input))?;
        out?;
        match &reference {
            None => reference = Some(trace),
            Some(r) => {
                if let Some(d) = divergence(r, &trace, (0, j)) {
                    return Ok(Verdict::Distinguishable(d));
                }
            }
        }
    }
    Ok(Verdict::Oblivious {
        runs: inputs.len(),
        events_per_run: reference.map_or(0, |t| t.len()),
    })
}
