//! `shufload` CLI: generate synthetic datasets, convert stream files to the
//! indexable format, verify file integrity, run loading benchmarks, and
//! compare measured throughputs.
//!
//! Exit codes: 0 success, 1 validation error, 2 verification failure,
//! 3 I/O error.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

use shufload::bench::{compare_records, run_bench, BenchConfig, BenchError, Selector};
use shufload::fetch::FetchKind;
use shufload::format::{convert_stream_to_indexable, FileFormat, FormatError};
use shufload::metrics::{read_csv, write_csv, write_jsonl, MetricsError};
use shufload::sampler::ShuffleMode;
use shufload::synth::{generate_dataset, GenSpec, PayloadKind};
use shufload::verify::{compare_sample_streams, verify_dataset};

const EXIT_VALIDATION: i32 = 1;
const EXIT_VERIFICATION: i32 = 2;
const EXIT_IO: i32 = 3;

#[derive(Parser)]
#[command(
    name = "shufload",
    version,
    about = "Globally shuffled dataset loading toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset file
    Gen(GenArgs),
    /// Convert a stream-format file to the indexable format
    Convert(ConvertArgs),
    /// Run the loading/training benchmark and append metrics rows
    Bench(BenchArgs),
    /// Check file integrity: checksums, manifest invariants, and the
    /// stream/indexable sibling round trip when one exists
    Verify(VerifyArgs),
    /// Compute per-config speedups between two strategies in a metrics CSV
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Stream,
    Indexable,
}

impl From<FormatArg> for FileFormat {
    fn from(value: FormatArg) -> Self {
        match value {
            FormatArg::Stream => FileFormat::Stream,
            FormatArg::Indexable => FileFormat::Indexable,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Buffered,
    #[value(name = "indices-mapping")]
    IndicesMapping,
}

impl From<ModeArg> for ShuffleMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::Sequential => ShuffleMode::Sequential,
            ModeArg::Buffered => ShuffleMode::Buffered,
            ModeArg::IndicesMapping => ShuffleMode::IndicesMapping,
        }
    }
}

#[derive(Parser)]
#[command(group(ArgGroup::new("payload").required(true).args(["sample_bytes", "dim"])))]
struct GenArgs {
    /// Number of samples to generate
    #[arg(long)]
    samples: u64,
    /// Fixed payload size in bytes (opaque random payloads)
    #[arg(long)]
    sample_bytes: Option<u64>,
    /// Feature dimension (decodable linear-model payloads)
    #[arg(long)]
    dim: Option<usize>,
    /// Write linear-model samples in ascending-target order
    #[arg(long, requires = "dim")]
    sorted_by_target: bool,
    /// Samples per chunk
    #[arg(long, default_value_t = 64)]
    chunk_samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Indexable)]
    format: FormatArg,
    /// Output file
    out: PathBuf,
}

#[derive(Parser)]
struct ConvertArgs {
    /// Stream-format source file
    src: PathBuf,
    /// Indexable destination file
    dst: PathBuf,
}

#[derive(Parser)]
struct BenchArgs {
    /// Indexable dataset file to benchmark against
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::IndicesMapping)]
    mode: ModeArg,
    /// Serial intra-batch fetching in requested order
    #[arg(long, conflicts_with = "unordered")]
    ordered: bool,
    /// Concurrent intra-batch fetching in completion order (default)
    #[arg(long)]
    unordered: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: u64,
    /// Measured steps per repeat
    #[arg(long, default_value_t = 300)]
    steps: u64,
    /// Unmeasured warmup steps per repeat
    #[arg(long, default_value_t = 20)]
    warmup: u64,
    #[arg(long, default_value_t = 3)]
    repeats: u32,
    /// Max in-flight sample fetches (0 = min(batch, 4 x hardware threads))
    #[arg(long, default_value_t = 0)]
    concurrency: usize,
    /// Completed batches buffered beyond the one in progress
    #[arg(long, default_value_t = 0)]
    prefetch_depth: usize,
    /// Synthetic per-sample read latency in microseconds
    #[arg(long, default_value_t = 0)]
    inject_latency_us: u64,
    /// Simulated per-step compute in microseconds (stand-in for the model)
    #[arg(long, default_value_t = 0)]
    compute_us: u64,
    /// Data-parallel learners emulated via strided shards
    #[arg(long, default_value_t = 1)]
    workers: u32,
    /// Buffer size for buffered mode
    #[arg(long, default_value_t = 1)]
    buffer_size: u64,
    /// Decoded chunks cached per handle (models a fixed DRAM budget)
    #[arg(long, default_value_t = 0)]
    cache_chunks: usize,
    /// Ask the OS to drop cached pages after every chunk read
    #[arg(long)]
    defeat_os_cache: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV to append to
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Also append a JSON-lines mirror next to the CSV
    #[arg(long)]
    json: bool,
}

#[derive(Parser)]
struct VerifyArgs {
    /// Dataset file (stream or indexable)
    path: PathBuf,
}

#[derive(Parser)]
struct CompareArgs {
    /// Metrics CSV produced by `bench`
    metrics: PathBuf,
    /// Baseline selector: `mode` or `mode:fetch`, e.g. indices-mapping:ordered
    #[arg(long)]
    baseline: String,
    /// Candidate selector, e.g. indices-mapping:unordered
    #[arg(long)]
    candidate: String,
    /// Optional CSV file for the speedup table
    #[arg(long)]
    out: Option<PathBuf>,
}

struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

/// I/O problems exit 3; everything else about a dataset's content is a
/// verification failure (2).
fn data_error(err: FormatError) -> CliError {
    let code = match err {
        FormatError::Io(_) => EXIT_IO,
        _ => EXIT_VERIFICATION,
    };
    CliError {
        code,
        message: err.to_string(),
    }
}

fn metrics_error(err: MetricsError) -> CliError {
    let code = match err {
        MetricsError::Io(_) => EXIT_IO,
        _ => EXIT_VALIDATION,
    };
    CliError {
        code,
        message: err.to_string(),
    }
}

fn bench_error(err: BenchError) -> CliError {
    match err {
        BenchError::Validation(msg) => CliError::validation(msg),
        BenchError::Format(e) => data_error(e),
        BenchError::Sampler(e) => CliError::validation(e.to_string()),
        BenchError::Fetch(e) => CliError {
            code: EXIT_VERIFICATION,
            message: e.to_string(),
        },
        BenchError::Metrics(e) => metrics_error(e),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                0
            } else {
                EXIT_VALIDATION
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Convert(args) => run_convert(args),
        Command::Bench(args) => run_bench_cmd(args),
        Command::Verify(args) => run_verify(args),
        Command::Compare(args) => run_compare(args),
    };
    if let Err(err) = result {
        eprintln!("error: {}", err.message);
        std::process::exit(err.code);
    }
}

fn run_gen(args: GenArgs) -> Result<(), CliError> {
    let payload = match (args.sample_bytes, args.dim) {
        (Some(sample_bytes), None) => PayloadKind::Opaque { sample_bytes },
        (None, Some(dim)) => PayloadKind::Linear {
            dim,
            sorted_by_target: args.sorted_by_target,
        },
        _ => unreachable!("clap group enforces exactly one"),
    };
    let spec = GenSpec {
        samples: args.samples,
        payload,
        samples_per_chunk: args.chunk_samples,
        seed: args.seed,
    };
    let stats = generate_dataset(&spec, args.format.into(), &args.out).map_err(|e| match e {
        FormatError::Io(_) => data_error(e),
        other => CliError::validation(other.to_string()),
    })?;
    println!(
        "wrote {} samples in {} chunks ({} bytes) to {}",
        stats.samples_written,
        stats.chunks_written,
        stats.bytes_written,
        args.out.display()
    );
    Ok(())
}

fn run_convert(args: ConvertArgs) -> Result<(), CliError> {
    let (manifest, stats) = convert_stream_to_indexable(&args.src, &args.dst).map_err(data_error)?;
    println!(
        "converted {} chunks / {} samples, {} -> {} bytes",
        stats.chunks, stats.samples, stats.bytes_in, stats.bytes_out
    );
    println!(
        "peak chunk buffer {} bytes + {} bytes fixed I/O buffers + {} bytes chunk index",
        stats.peak_buffer_bytes, stats.fixed_io_buffer_bytes, stats.index_bytes
    );
    println!(
        "manifest: {} chunks, {} samples per chunk, encoding {:?}",
        manifest.schema.total_chunks, manifest.schema.samples_per_chunk,
        manifest.schema.sample_encoding
    );
    Ok(())
}

fn run_bench_cmd(args: BenchArgs) -> Result<(), CliError> {
    let config = BenchConfig {
        mode: args.mode.into(),
        buffer_size: args.buffer_size,
        kind: if args.ordered {
            FetchKind::Ordered
        } else {
            FetchKind::Unordered
        },
        batch_size: args.batch_size,
        steps: args.steps,
        warmup_steps: args.warmup,
        repeats: args.repeats,
        seed: args.seed,
        concurrency: args.concurrency,
        prefetch_depth: args.prefetch_depth,
        inject_latency: Duration::from_micros(args.inject_latency_us),
        simulated_compute: Duration::from_micros(args.compute_us),
        workers: args.workers,
        cache_chunks: args.cache_chunks,
        defeat_os_cache: args.defeat_os_cache,
        ..BenchConfig::new(args.dataset)
    };
    let records = run_bench(&config).map_err(bench_error)?;
    write_csv(&args.out, &records).map_err(metrics_error)?;
    if args.json {
        let jsonl = args.out.with_extension("jsonl");
        write_jsonl(&jsonl, &records).map_err(metrics_error)?;
    }
    for record in records.iter().filter(|r| r.is_aggregate()) {
        println!(
            "{} {} {}: {:.1} samples/s (batch {}, steps {}, wall {:.3}s)",
            record.mode,
            record.fetch,
            record.phase,
            record.samples_per_second,
            record.batch_size,
            record.steps,
            record.wall_time_s
        );
    }
    println!("appended {} rows to {}", records.len(), args.out.display());
    Ok(())
}

/// The sibling of `foo.stream` is `foo.indexed` and vice versa; datasets
/// generated or converted side by side can be cross-checked byte for byte.
fn sibling_of(path: &Path) -> Option<PathBuf> {
    let sibling = match path.extension().and_then(|e| e.to_str()) {
        Some("stream") => path.with_extension("indexed"),
        Some("indexed") => path.with_extension("stream"),
        _ => return None,
    };
    sibling.exists().then_some(sibling)
}

fn run_verify(args: VerifyArgs) -> Result<(), CliError> {
    let report = verify_dataset(&args.path).map_err(data_error)?;
    println!(
        "{}: {} format, {} chunks, {} samples, checksums ok{}",
        args.path.display(),
        report.format,
        report.chunks,
        report.samples,
        if report.manifest_audited {
            ", manifest audited"
        } else {
            ""
        }
    );
    if let Some(sibling) = sibling_of(&args.path) {
        match compare_sample_streams(&args.path, &sibling).map_err(data_error)? {
            None => println!("sibling {} holds identical samples", sibling.display()),
            Some(index) => {
                return Err(CliError {
                    code: EXIT_VERIFICATION,
                    message: format!(
                        "sibling {} diverges at sample {}",
                        sibling.display(),
                        index
                    ),
                });
            }
        }
    }
    println!("PASS");
    Ok(())
}

fn run_compare(args: CompareArgs) -> Result<(), CliError> {
    let baseline: Selector = args.baseline.parse().map_err(CliError::validation)?;
    let candidate: Selector = args.candidate.parse().map_err(CliError::validation)?;
    let records = read_csv(&args.metrics).map_err(metrics_error)?;
    let report = compare_records(&records, &baseline, &candidate);
    print!("{}", report.to_text(&baseline, &candidate));
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_csv()).map_err(|e| CliError {
            code: EXIT_IO,
            message: e.to_string(),
        })?;
    }
    if report.rows.is_empty() {
        return Err(CliError::validation(
            "no matching baseline/candidate config pairs in the metrics file",
        ));
    }
    Ok(())
}
