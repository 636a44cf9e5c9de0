//! WordCount and KMeans, the file encoder, and synthetic inputs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use crate::aggregate::{AggregatorKind, LANE};
use crate::block_store::{BlockFileMeta, FileId, Location, UntrustedStore};
use crate::enclave::{Enclave, PlainBlock, SealKey};
use crate::engine::{read_records, Emit, JobConfig, MapFunction};
use crate::error::{Error, Result};
use crate::record::{KvRecord, KEY_LEN};

/// Record size of encoded text: a sequence-number key and a 16-byte token.
pub const TEXT_RECORD_SIZE: usize = KEY_LEN + 16;

/// WordCount intermediate record: word key and an 8-byte count, rounded up
/// to keep records a power-of-two size.
pub const WORDCOUNT_RECORD_SIZE: usize = 32;

/// KMeans blocks hold this many records when the block is large enough.
pub const KMEANS_RECORDS_PER_BLOCK: usize = 30;

/// Fixed-point scale for KMeans coordinate sums.
pub const FIXED_SCALE: f64 = (1u64 << 32) as f64;

/// Seal `records` into a new file, `records_per_block` at a time; the last
/// block is topped up with dummies.
pub fn encode_records(
    store: &mut UntrustedStore,
    key: &SealKey,
    meta: BlockFileMeta,
    location: Location,
    records: impl IntoIterator<Item = KvRecord>,
) -> Result<FileId> {
    let file = store.create_file(meta, location)?;
    let mut enclave = Enclave::new(key, 2)?;
    let mut block = PlainBlock::dummy(file.0, 0, &meta);
    let mut pos = 0;
    let mut index = 0;
    for rec in records {
        if rec.as_bytes().len() != meta.record_size {
            return Err(Error::OversizeRecord(format!(
                "record of {} bytes in a file of {}-byte records",
                rec.as_bytes().len(),
                meta.record_size
            )));
        }
        block.record_mut(pos).copy_from_slice(rec.as_bytes());
        pos += 1;
        if pos == meta.records_per_block {
            enclave.store(store, &block)?;
            index += 1;
            block = PlainBlock::dummy(file.0, index, &meta);
            pos = 0;
        }
    }
    if pos > 0 {
        enclave.store(store, &block)?;
    }
    Ok(file)
}

fn seq_key(i: u64) -> [u8; 8] {
    i.to_be_bytes()
}

/// One record per whitespace-separated token, value = the token bytes. Tokens
/// longer than the value field are cut; WordCount keys are shorter anyway.
pub fn text_records(text: &str, record_size: usize) -> Result<Vec<KvRecord>> {
    let room = record_size.saturating_sub(KEY_LEN);
    text.split_ascii_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            let b = tok.as_bytes();
            KvRecord::new(&seq_key(i as u64), &b[..b.len().min(room)], record_size)
        })
        .collect()
}

/// One record per point, value = coordinates as little-endian `f64`.
pub fn point_records(points: &[Vec<f64>], record_size: usize) -> Result<Vec<KvRecord>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let bytes: Vec<u8> = p.iter().flat_map(|x| x.to_le_bytes()).collect();
            KvRecord::new(&seq_key(i as u64), &bytes, record_size)
        })
        .collect()
}

pub fn encode_text(
    store: &mut UntrustedStore,
    key: &SealKey,
    meta: BlockFileMeta,
    location: Location,
    text: &str,
) -> Result<FileId> {
    let recs = text_records(text, meta.record_size)?;
    encode_records(store, key, meta, location, recs)
}

pub fn encode_points(
    store: &mut UntrustedStore,
    key: &SealKey,
    meta: BlockFileMeta,
    location: Location,
    points: &[Vec<f64>],
) -> Result<FileId> {
    let recs = point_records(points, meta.record_size)?;
    encode_records(store, key, meta, location, recs)
}

/// Parse whitespace- or comma-separated numbers, one point per line.
pub fn parse_points(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = line
            .split(|c: char| c == ',' || c.is_ascii_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        match dim {
            None => dim = Some(p.len()),
            Some(d) if d != p.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: p.len(),
                })
            }
            _ => {}
        }
        out.push(p);
    }
    Ok(out)
}

fn trim_zeros(b: &[u8]) -> &[u8] {
    let end = b.iter().rposition(|&x| x != 0).map_or(0, |p| p + 1);
    &b[..end]
}

/// Tokens of an encoded text file, in order.
pub fn decode_text(store: &mut UntrustedStore, key: &SealKey, file: FileId) -> Result<Vec<String>> {
    Ok(read_records(store, key, file)?
        .iter()
        .map(|r| String::from_utf8_lossy(trim_zeros(r.value())).into_owned())
        .collect())
}

pub fn decode_points(
    store: &mut UntrustedStore,
    key: &SealKey,
    file: FileId,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    read_records(store, key, file)?
        .iter()
        .map(|r| read_point(r.value(), dim))
        .collect()
}

fn read_point(value: &[u8], dim: usize) -> Result<Vec<f64>> {
    if value.len() < dim * 8 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: value.len() / 8,
        });
    }
    Ok((0..dim)
        .map(|i| f64::from_le_bytes(value[i * 8..(i + 1) * 8].try_into().unwrap()))
        .collect())
}

/// Key bytes with trailing zero padding removed, as text.
pub fn key_text(rec: &KvRecord) -> String {
    String::from_utf8_lossy(trim_zeros(rec.key())).into_owned()
}

/// The WordCount tokenizer: ASCII whitespace, lowercased, cut to the key width.
pub fn tokenize(fragment: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
    trim_zeros(fragment)
        .split(|b| b.is_ascii_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let mut w = t[..t.len().min(KEY_LEN)].to_vec();
            w.make_ascii_lowercase();
            w
        })
}

/// `(word, 1)` for every token of a text fragment.
pub fn wordcount_map(fragment: &[u8]) -> Vec<(Vec<u8>, u64)> {
    tokenize(fragment).map(|w| (w, 1)).collect()
}

/// WordCount over records whose value is a text fragment.
#[derive(Debug, Clone, Copy)]
pub struct WordCount {
    /// Most tokens a single input record may hold.
    pub max_tokens: usize,
}

impl Default for WordCount {
    fn default() -> Self {
        WordCount { max_tokens: 1 }
    }
}

impl MapFunction for WordCount {
    fn max_outputs(&self) -> usize {
        self.max_tokens
    }

    fn map(&self, record: &[u8], emit: &mut Emit<'_>) -> Result<()> {
        for w in tokenize(&record[KEY_LEN..]) {
            emit(&w, &1u64.to_le_bytes())?;
        }
        Ok(())
    }
}

pub fn wordcount_config(key: SealKey, block_size: usize) -> JobConfig {
    let mut c = JobConfig::new(key);
    c.block_size = block_size;
    c.record_size = WORDCOUNT_RECORD_SIZE;
    c.aggregator = AggregatorKind::Count;
    c
}

/// Decode WordCount output into `word -> count`.
pub fn word_counts(records: &[KvRecord]) -> BTreeMap<String, u64> {
    records
        .iter()
        .map(|r| {
            (
                key_text(r),
                u64::from_le_bytes(r.value()[..8].try_into().unwrap()),
            )
        })
        .collect()
}

/// Plain hash-map WordCount over raw text.
pub fn wordcount_reference(text: &str) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for tok in text.split_ascii_whitespace() {
        for w in tokenize(tok.as_bytes()) {
            *m.entry(String::from_utf8_lossy(&w).into_owned()).or_default() += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub cluster_id: u32,
    pub coordinates: Vec<f64>,
}

/// Index of the nearest centroid by squared distance; ties go to the lower id.
pub fn nearest(point: &[f64], centroids: &[Centroid]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d: f64 = c
            .coordinates
            .iter()
            .zip(point)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let better = d < best_d || (d == best_d && c.cluster_id < centroids[best].cluster_id);
        if better {
            best = i;
            best_d = d;
        }
    }
    best
}

fn to_fixed(x: f64) -> i64 {
    (x * FIXED_SCALE).round() as i64
}

/// One KMeans assignment step over records holding `f64` coordinates.
///
/// Emits `(cluster id, [fixed-point coordinates.., 1])`, to be summed.
#[derive(Debug, Clone)]
pub struct KMeans {
    centroids: Vec<Centroid>,
    dim: usize,
}

impl KMeans {
    pub fn new(centroids: Vec<Centroid>) -> Result<Self> {
        let dim = centroids
            .first()
            .map(|c| c.coordinates.len())
            .ok_or_else(|| Error::Config("kmeans needs at least one centroid".into()))?;
        if dim == 0 {
            return Err(Error::Config("kmeans needs at least one dimension".into()));
        }
        for c in &centroids {
            if c.coordinates.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.coordinates.len(),
                });
            }
        }
        Ok(KMeans { centroids, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    /// Value bytes an emitted record needs.
    pub fn value_width(&self) -> usize {
        (self.dim + 1) * LANE
    }

    /// Intermediate geometry: up to [`KMEANS_RECORDS_PER_BLOCK`] records per block.
    pub fn config(&self, key: SealKey, block_size: usize) -> Result<JobConfig> {
        let min = KEY_LEN + self.value_width();
        let rpb = (block_size / min).min(KMEANS_RECORDS_PER_BLOCK);
        if rpb == 0 {
            return Err(Error::InvalidMeta(format!(
                "block size {block_size} cannot hold a {min}-byte record"
            )));
        }
        let mut c = JobConfig::new(key);
        c.block_size = block_size;
        c.record_size = block_size / rpb;
        c.aggregator = AggregatorKind::Sum;
        Ok(c)
    }

    /// Geometry for encoded point files matching [`KMeans::config`].
    pub fn input_meta(&self, block_size: usize) -> Result<BlockFileMeta> {
        let cfg = self.config(SealKey::new([0; 16]), block_size)?;
        cfg.meta()
    }

    /// New centroids from the job's summed output. Clusters that received no
    /// points keep their old position.
    pub fn update(&self, output: &[KvRecord]) -> Result<Vec<Centroid>> {
        let mut next = self.centroids.clone();
        for rec in output {
            let id = u32::from_be_bytes(rec.key()[..4].try_into().unwrap());
            let lanes = AggregatorKind::Sum.lanes(rec.value());
            let count = lanes[self.dim];
            let c = next
                .iter_mut()
                .find(|c| c.cluster_id == id)
                .ok_or_else(|| Error::Config(format!("output names unknown cluster {id}")))?;
            if count > 0 {
                for (d, x) in c.coordinates.iter_mut().enumerate() {
                    *x = lanes[d] as f64 / FIXED_SCALE / count as f64;
                }
            }
        }
        Ok(next)
    }
}

impl MapFunction for KMeans {
    fn max_outputs(&self) -> usize {
        1
    }

    fn map(&self, record: &[u8], emit: &mut Emit<'_>) -> Result<()> {
        let p = read_point(&record[KEY_LEN..], self.dim)?;
        let c = &self.centroids[nearest(&p, &self.centroids)];
        let mut v = Vec::with_capacity(self.value_width());
        for x in &p {
            v.extend_from_slice(&to_fixed(*x).to_le_bytes());
        }
        v.extend_from_slice(&1i64.to_le_bytes());
        emit(&c.cluster_id.to_be_bytes(), &v)
    }
}

/// One plaintext KMeans iteration in `f64`.
pub fn kmeans_reference(points: &[Vec<f64>], centroids: &[Centroid]) -> Vec<Centroid> {
    let dim = centroids[0].coordinates.len();
    let mut sums = vec![vec![0f64; dim]; centroids.len()];
    let mut counts = vec![0u64; centroids.len()];
    for p in points {
        let i = nearest(p, centroids);
        counts[i] += 1;
        for (s, x) in sums[i].iter_mut().zip(p) {
            *s += x;
        }
    }
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| Centroid {
            cluster_id: c.cluster_id,
            coordinates: if counts[i] == 0 {
                c.coordinates.clone()
            } else {
                sums[i].iter().map(|s| s / counts[i] as f64).collect()
            },
        })
        .collect()
}

/// `tokens` words drawn from a Zipf law over `vocab` ranks; rank r is `w<r>`.
pub fn zipf_corpus(tokens: usize, vocab: u64, exponent: f64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(vocab, exponent).expect("valid zipf parameters");
    (0..tokens)
        .map(|_| format!("w{}", zipf.sample(&mut rng) as u64))
        .collect()
}

/// `n` points around `k` random centres in `[-100, 100]^dim`, spread 5.
pub fn gaussian_points(n: usize, k: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..k.max(1))
        .map(|_| (0..dim).map(|_| rng.gen_range(-100.0..100.0)).collect())
        .collect();
    let noise = Normal::new(0.0, 5.0).unwrap();
    (0..n)
        .map(|_| {
            let c = &centres[rng.gen_range(0..centres.len())];
            c.iter().map(|x| x + noise.sample(&mut rng)).collect()
        })
        .collect()
}

/// The first `k` points as initial centroids, ids `0..k`.
pub fn initial_centroids(points: &[Vec<f64>], k: usize) -> Vec<Centroid> {
    points
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, p)| Centroid {
            cluster_id: i as u32,
            coordinates: p.clone(),
        })
        .collect()
}
