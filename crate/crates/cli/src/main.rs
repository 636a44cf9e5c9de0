use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use oblivmr::apps::{
    decode_points, encode_points, encode_text, gaussian_points, initial_centroids, parse_points,
    point_records, text_records, word_counts, wordcount_config, zipf_corpus, Centroid, KMeans, WordCount,
    TEXT_RECORD_SIZE,
};
use oblivmr::bench::{self, CSV_HEADER, SCENARIOS};
use oblivmr::{
    assert_oblivious, read_records, run_job, BlockFileMeta, InputShape, JobConfig, Location, PaddingMode,
    SealKey, SortKind, UntrustedStore, Verdict,
};

#[derive(Parser)]
#[command(
    name = "oblivmr",
    version,
    about = "Oblivious MapReduce over sealed block files"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    /// Whitespace-separated tokens, one record per token.
    Text,
    /// One point per line, coordinates separated by spaces or commas.
    Points,
}

#[derive(Clone, Copy, ValueEnum)]
enum Job {
    Wordcount,
    Kmeans,
}

#[derive(Subcommand)]
enum Command {
    /// Seal a plaintext file into a block file.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        block_size: usize,
        /// Minimum record size; rounded up so records fill the block.
        #[arg(long, default_value_t = TEXT_RECORD_SIZE)]
        record_size: usize,
        /// 128-bit sealing key as 32 hex digits.
        #[arg(long)]
        key: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Run a job over an encoded file and print its result.
    Run {
        #[arg(long, value_enum)]
        job: Job,
        /// `key = value` lines; `key_hex` is required.
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Where to write the sealed output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a job over random inputs of one shape and compare access traces.
    Audit {
        #[arg(long, value_enum)]
        job: Job,
        #[arg(long, default_value_t = 10)]
        sweeps: usize,
        /// Input blocks per run.
        #[arg(long, default_value_t = 8)]
        blocks: u64,
        #[arg(long, default_value_t = 512)]
        block_size: usize,
        #[arg(long, default_value_t = PaddingMode::PadThenPostprocess)]
        padding: PaddingMode,
        #[arg(long, default_value_t = SortKind::Bitonic)]
        sort: SortKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run benchmark scenarios and write access counts as CSV.
    Bench {
        /// Comma-separated scenario names, or `all`.
        #[arg(long, default_value = "all")]
        scenarios: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        blocks: u64,
        #[arg(long, default_value_t = 2048)]
        block_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Encode {
            input,
            out,
            block_size,
            record_size,
            key,
            format,
        } => encode(&input, &out, block_size, record_size, &key, format),
        Command::Run {
            job,
            config,
            input,
            out,
        } => run_file_job(job, &config, &input, &out),
        Command::Audit {
            job,
            sweeps,
            blocks,
            block_size,
            padding,
            sort,
            seed,
        } => audit(job, sweeps, blocks, block_size, padding, sort, seed),
        Command::Bench {
            scenarios,
            out,
            blocks,
            block_size,
            seed,
        } => run_bench(&scenarios, &out, blocks, block_size, seed),
    }
}

fn encode(
    input: &Path,
    out: &Path,
    block_size: usize,
    record_size: usize,
    key: &str,
    format: Format,
) -> Result<ExitCode> {
    let key = SealKey::from_hex(key)?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let meta = BlockFileMeta::for_block_size(block_size, record_size)?;
    let mut store = UntrustedStore::new();
    let location = Location::Path(out.to_path_buf());
    let (file, records) = match format {
        Format::Text => (
            encode_text(&mut store, &key, meta, location, &text)?,
            text.split_ascii_whitespace().count(),
        ),
        Format::Points => {
            let pts = parse_points(&text)?;
            (encode_points(&mut store, &key, meta, location, &pts)?, pts.len())
        }
    };
    println!(
        "encoded {records} records into {} blocks of {block_size} bytes ({} records of {} bytes each)",
        store.block_count(file)?,
        meta.records_per_block,
        meta.record_size
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_centroids(list: &str) -> Result<Vec<Centroid>> {
    list.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, p)| {
            let coordinates = p
                .split(|c: char| c == ',' || c.is_ascii_whitespace())
                .filter(|s| !s.is_empty())
                .map(|x| x.parse::<f64>().with_context(|| format!("centroid {i}: {x:?}")))
                .collect::<Result<Vec<_>>>()?;
            Ok(Centroid {
                cluster_id: i as u32,
                coordinates,
            })
        })
        .collect()
}

fn run_file_job(job: Job, config: &Path, input: &Path, out: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let (cfg, mut extras) = JobConfig::parse(&text)?;
    let mut store = UntrustedStore::new();
    let file = store
        .open_file(input)
        .with_context(|| format!("opening {}", input.display()))?;
    match job {
        Job::Wordcount => {
            reject_extras(&extras)?;
            let outcome = run_job(&cfg, &WordCount::default(), &mut store, file)?;
            store.save(outcome.output, out)?;
            let recs = read_records(&mut store, &cfg.seal_key, outcome.output)?;
            for (word, count) in word_counts(&recs) {
                println!("{word}\t{count}");
            }
        }
        Job::Kmeans => {
            let centroids = match (extras.remove("centroids"), extras.remove("k")) {
                (Some(list), None) => parse_centroids(&list)?,
                (None, Some(k)) => {
                    let k: usize = k.parse().context("k: not a number")?;
                    let dim: usize = extras
                        .remove("dim")
                        .map(|d| d.parse())
                        .transpose()
                        .context("dim: not a number")?
                        .unwrap_or(2);
                    let pts = decode_points(&mut store, &cfg.seal_key, file, dim)?;
                    initial_centroids(&pts, k)
                }
                _ => bail!("kmeans config needs exactly one of `centroids` or `k`"),
            };
            reject_extras(&extras)?;
            let km = KMeans::new(centroids)?;
            let mut kcfg = km.config(cfg.seal_key.clone(), cfg.block_size)?;
            kcfg.padding = cfg.padding;
            kcfg.sort = cfg.sort;
            kcfg.buffer_capacity = cfg.buffer_capacity;
            let outcome = run_job(&kcfg, &km, &mut store, file)?;
            store.save(outcome.output, out)?;
            let recs = read_records(&mut store, &kcfg.seal_key, outcome.output)?;
            for c in km.update(&recs)? {
                let coords: Vec<String> = c.coordinates.iter().map(|x| format!("{x:.6}")).collect();
                println!("{}\t{}", c.cluster_id, coords.join(" "));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn reject_extras(extras: &BTreeMap<String, String>) -> Result<()> {
    if let Some(k) = extras.keys().next() {
        bail!("unknown config key `{k}`");
    }
    Ok(())
}

fn audit(
    job: Job,
    sweeps: usize,
    blocks: u64,
    block_size: usize,
    padding: PaddingMode,
    sort: SortKind,
    seed: u64,
) -> Result<ExitCode> {
    if sweeps == 0 || blocks == 0 {
        bail!("need at least one sweep and one block");
    }
    let key = SealKey::random();
    let verdict = match job {
        Job::Wordcount => {
            let meta = BlockFileMeta::for_block_size(block_size, TEXT_RECORD_SIZE)?;
            let n = blocks as usize * meta.records_per_block;
            let mut cfg = wordcount_config(key.clone(), block_size);
            cfg.padding = padding;
            cfg.sort = sort;
            // one corner case first, then random corpora
            let mut inputs = vec![vec!["same".to_string(); n]];
            inputs.extend((1..sweeps).map(|i| zipf_corpus(n, 1000, 1.0, seed + i as u64)));
            assert_oblivious(
                &inputs,
                |_| InputShape {
                    block_count: blocks,
                    records_per_block: meta.records_per_block,
                    record_size: meta.record_size,
                },
                |toks| {
                    let mut store = UntrustedStore::new();
                    let recs = text_records(&toks.join(" "), meta.record_size)?;
                    let f = oblivmr::apps::encode_records(&mut store, &key, meta, Location::Memory, recs)?;
                    run_job(&cfg, &WordCount::default(), &mut store, f)
                },
            )?
        }
        Job::Kmeans => {
            let km = KMeans::new(initial_centroids(&gaussian_points(5, 5, 2, seed), 5))?;
            let meta = km.input_meta(block_size)?;
            let n = blocks as usize * meta.records_per_block;
            let mut cfg = km.config(key.clone(), block_size)?;
            cfg.padding = padding;
            cfg.sort = sort;
            let mut inputs = vec![vec![km.centroids()[0].coordinates.clone(); n]];
            inputs.extend((1..sweeps).map(|i| gaussian_points(n, 5, 2, seed + i as u64)));
            assert_oblivious(
                &inputs,
                |_| InputShape {
                    block_count: blocks,
                    records_per_block: meta.records_per_block,
                    record_size: meta.record_size,
                },
                |pts| {
                    let mut store = UntrustedStore::new();
                    let recs = point_records(pts, meta.record_size)?;
                    let f = oblivmr::apps::encode_records(&mut store, &key, meta, Location::Memory, recs)?;
                    run_job(&cfg, &km, &mut store, f)
                },
            )?
        }
    };
    println!("{verdict}");
    Ok(match verdict {
        Verdict::Oblivious { .. } => ExitCode::SUCCESS,
        Verdict::Distinguishable(_) => ExitCode::FAILURE,
    })
}

fn run_bench(scenarios: &str, out: &Path, blocks: u64, block_size: usize, seed: u64) -> Result<ExitCode> {
    let names: Vec<&str> = if scenarios.trim() == "all" {
        SCENARIOS.to_vec()
    } else {
        scenarios
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    };
    let mut report = bench::BenchReport::default();
    println!("{CSV_HEADER}");
    for name in names {
        let row = bench::run_scenario(name, blocks, block_size, seed)?;
        println!("{}", row.csv_line());
        report.rows.push(row);
    }
    fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    for (slow, fast) in [
        ("wordcount-oram-baseline", "wordcount-sgxmr"),
        ("kmeans-oram-baseline", "kmeans-sgxmr"),
        ("oram-scan", "seq-scan"),
    ] {
        if let Some(r) = report.touch_ratio(slow, fast) {
            println!("# {slow} / {fast}: {r:.2}x untrusted block touches");
        }
    }
    Ok(ExitCode::SUCCESS)
}
