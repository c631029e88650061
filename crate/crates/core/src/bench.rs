//! Benchmark harness: runs the loading matrix (shuffle mode x engine x
//! batch size) against a dataset file and emits [`MetricsRecord`] rows.
//!
//! Measurement design: `warmup_steps` batches are consumed unmeasured,
//! then `steps` batches are timed, repeated `repeats` times; each repeat
//! emits one row and the set is closed by a `mean` aggregate row. When a
//! simulated per-step compute cost is configured, the harness runs the
//! end-to-end measurement and a loading-only twin (compute = 0) so the
//! loading bottleneck can be read directly from the CSV. Data-parallel
//! learners are emulated by `workers` concurrent loader instances over
//! strided shards; their throughputs are summed.

use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::fetch::{
    epoch_loader, identity_preprocess, Assembly, ErrorMode, FetchConfig, FetchError, FetchKind,
};
use crate::format::{open_indexable, open_indexable_with, FormatError, ReadOptions};
use crate::metrics::{aggregate_records, MetricsError, MetricsRecord, StageSnapshot};
use crate::sampler::{EpochPlan, SamplerError, ShuffleMode, ShuffleSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    LoadingOnly,
    EndToEnd,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::LoadingOnly => write!(f, "loading_only"),
            Phase::EndToEnd => write!(f, "end_to_end"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dataset: PathBuf,
    pub mode: ShuffleMode,
    pub buffer_size: u64,
    pub kind: FetchKind,
    pub batch_size: u64,
    pub steps: u64,
    pub warmup_steps: u64,
    pub repeats: u32,
    pub seed: u64,
    /// 0 resolves to the default sizing for the batch size.
    pub concurrency: usize,
    pub prefetch_depth: usize,
    pub inject_latency: Duration,
    /// Per-step stand-in for the model's compute; 0 means loading-only.
    pub simulated_compute: Duration,
    pub workers: u32,
    pub cache_chunks: usize,
    pub defeat_os_cache: bool,
}

impl BenchConfig {
    pub fn new(dataset: PathBuf) -> Self {
        Self {
            dataset,
            mode: ShuffleMode::IndicesMapping,
            buffer_size: 1,
            kind: FetchKind::Unordered,
            batch_size: 32,
            steps: 300,
            warmup_steps: 20,
            repeats: 3,
            seed: 0,
            concurrency: 0,
            prefetch_depth: 0,
            inject_latency: Duration::ZERO,
            simulated_compute: Duration::ZERO,
            workers: 1,
            cache_chunks: 0,
            defeat_os_cache: false,
        }
    }

    fn resolved_concurrency(&self) -> usize {
        if self.concurrency > 0 {
            self.concurrency
        } else {
            FetchConfig::for_batch_size(self.batch_size).max_concurrent_fetches
        }
    }

    fn fetch_config(&self) -> FetchConfig {
        FetchConfig {
            max_concurrent_fetches: self.resolved_concurrency(),
            prefetch_depth: self.prefetch_depth,
            assembly: Assembly::ArrivalOrder,
            on_error: ErrorMode::FailFast,
            synthetic_read_latency: self.inject_latency,
        }
    }

    fn read_options(&self) -> ReadOptions {
        ReadOptions {
            cache_chunks: self.cache_chunks,
            read_latency: self.inject_latency,
            defeat_os_cache: self.defeat_os_cache,
        }
    }
}

/// Runs the configured measurement and returns per-repeat rows plus one
/// aggregate row per phase.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<MetricsRecord>, BenchError> {
    validate(config)?;
    let phases: &[Phase] = if config.simulated_compute.is_zero() {
        &[Phase::LoadingOnly]
    } else {
        &[Phase::EndToEnd, Phase::LoadingOnly]
    };
    let mut records = Vec::new();
    for &phase in phases {
        let mut repeats = Vec::new();
        for repeat in 0..config.repeats {
            repeats.push(run_once(config, phase, repeat)?);
        }
        let aggregate = aggregate_records(&repeats);
        records.extend(repeats);
        records.push(aggregate);
    }
    Ok(records)
}

/// Checks the dataset/config pairing before any measurement runs.
fn validate(config: &BenchConfig) -> Result<(), BenchError> {
    if config.steps < 1 {
        return Err(BenchError::Validation("steps must be >= 1".into()));
    }
    if config.repeats < 1 {
        return Err(BenchError::Validation("repeats must be >= 1".into()));
    }
    if config.batch_size < 1 {
        return Err(BenchError::Validation("batch-size must be >= 1".into()));
    }
    if config.workers < 1 {
        return Err(BenchError::Validation("workers must be >= 1".into()));
    }
    if config.mode == ShuffleMode::Buffered && config.buffer_size < 1 {
        return Err(BenchError::Validation(
            "buffered mode requires buffer-size >= 1".into(),
        ));
    }
    let handle = open_indexable(&config.dataset)?;
    let n = handle.total_samples();
    if n == 0 {
        return Err(BenchError::Validation("dataset is empty".into()));
    }
    // The smallest worker shard must still fill one batch.
    let smallest_shard = n / config.workers as u64;
    if smallest_shard / config.batch_size == 0 {
        return Err(BenchError::Validation(format!(
            "batch size {} exceeds the {}-sample shard of the smallest of {} workers",
            config.batch_size, smallest_shard, config.workers
        )));
    }
    Ok(())
}

struct WorkerOutcome {
    wall: Duration,
    stages: StageSnapshot,
    samples: u64,
}

fn run_once(
    config: &BenchConfig,
    phase: Phase,
    repeat: u32,
) -> Result<MetricsRecord, BenchError> {
    let world_size = config.workers;
    let outcomes: Vec<Result<WorkerOutcome, BenchError>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..world_size)
            .map(|worker_id| {
                scope.spawn(move || run_worker(config, phase, worker_id, world_size))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut wall_max = Duration::ZERO;
    let mut stages = StageSnapshot::default();
    let mut sps_total = 0.0f64;
    let mut samples_total = 0u64;
    for outcome in outcomes {
        let outcome = outcome?;
        wall_max = wall_max.max(outcome.wall);
        sps_total += outcome.samples as f64 / outcome.wall.as_secs_f64();
        samples_total += outcome.samples;
        stages.accumulate(&outcome.stages);
    }
    debug_assert_eq!(
        samples_total,
        config.steps * config.batch_size * world_size as u64
    );

    let dataset_samples = open_indexable(&config.dataset)?.total_samples();
    let ns = |v: u64| v as f64 / 1e9;
    Ok(MetricsRecord {
        mode: config.mode.to_string(),
        fetch: config.kind.to_string(),
        phase: phase.to_string(),
        batch_size: config.batch_size,
        dataset_samples,
        steps: config.steps,
        concurrency: config.resolved_concurrency() as u64,
        prefetch_depth: config.prefetch_depth as u64,
        inject_latency_us: config.inject_latency.as_micros() as u64,
        compute_us: config.simulated_compute.as_micros() as u64,
        workers: world_size as u64,
        repeat: repeat.to_string(),
        wall_time_s: wall_max.as_secs_f64(),
        samples_per_second: sps_total,
        sps_stddev: None,
        bytes_read: stages.bytes_read,
        peak_in_flight: stages.peak_in_flight,
        index_lookup_s: ns(stages.index_lookup_ns),
        read_s: ns(stages.read_ns),
        decode_s: ns(stages.decode_ns),
        preprocess_s: ns(stages.preprocess_ns),
        assemble_s: ns(stages.assemble_ns),
        consume_s: ns(stages.consume_ns),
    })
}

fn run_worker(
    config: &BenchConfig,
    phase: Phase,
    worker_id: u32,
    world_size: u32,
) -> Result<WorkerOutcome, BenchError> {
    let handle = Arc::new(open_indexable_with(&config.dataset, config.read_options())?);
    let n = handle.total_samples();
    let fetch = config.fetch_config();
    let compute = match phase {
        Phase::EndToEnd => config.simulated_compute,
        Phase::LoadingOnly => Duration::ZERO,
    };

    let mut epoch = 0u64;
    let mut loader = None;
    let next_batch = |loader: &mut Option<crate::fetch::EpochLoader>,
                          epoch: &mut u64|
     -> Result<crate::fetch::AssembledBatch, BenchError> {
        loop {
            if loader.is_none() {
                let spec = ShuffleSpec {
                    mode: config.mode,
                    seed: config.seed,
                    epoch: *epoch,
                    buffer_size: config.buffer_size,
                };
                let plan = EpochPlan::new(&spec, n, config.batch_size, true, worker_id, world_size)?;
                *epoch += 1;
                *loader = Some(epoch_loader(
                    Arc::clone(&handle) as Arc<dyn crate::fetch::SampleSource>,
                    plan,
                    config.kind,
                    fetch.clone(),
                    identity_preprocess(),
                ));
            }
            match loader.as_mut().unwrap().next() {
                Some(batch) => return Ok(batch?),
                None => *loader = None, // epoch exhausted; plan the next
            }
        }
    };

    for _ in 0..config.warmup_steps {
        next_batch(&mut loader, &mut epoch)?;
    }

    let meter = Arc::clone(handle.meter());
    meter.reset_peak();
    let before = meter.snapshot();
    let started = Instant::now();
    let mut samples = 0u64;
    for _ in 0..config.steps {
        let batch = next_batch(&mut loader, &mut epoch)?;
        samples += batch.samples.len() as u64;
        if !compute.is_zero() {
            let consume_start = Instant::now();
            thread::sleep(compute);
            meter.add_consume(consume_start.elapsed());
        }
    }
    let wall = started.elapsed();
    let stages = meter.snapshot().delta_since(&before);
    drop(loader); // stop any prefetch work before returning

    Ok(WorkerOutcome {
        wall,
        stages,
        samples,
    })
}

/// Selects benchmark rows by shuffle mode and optionally by fetch engine.
/// Parsed from `mode` or `mode:fetch`, e.g. `indices-mapping:unordered`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selector {
    pub mode: ShuffleMode,
    pub fetch: Option<FetchKind>,
}

impl std::str::FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mode, fetch) = match s.split_once(':') {
            Some((m, f)) => {
                let fetch = match f {
                    "ordered" => FetchKind::Ordered,
                    "unordered" => FetchKind::Unordered,
                    other => return Err(format!("unknown fetch kind `{other}`")),
                };
                (m, Some(fetch))
            }
            None => (s, None),
        };
        Ok(Selector {
            mode: mode.parse()?,
            fetch,
        })
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.fetch {
            Some(kind) => write!(f, "{}:{}", self.mode, kind),
            None => write!(f, "{}", self.mode),
        }
    }
}

impl Selector {
    fn matches(&self, record: &MetricsRecord) -> bool {
        record.mode == self.mode.to_string()
            && self
                .fetch
                .map(|k| record.fetch == k.to_string())
                .unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub config: String,
    pub baseline_sps: f64,
    pub candidate_sps: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Configs present for only one side, or ambiguous (duplicated) ones.
    pub unmatched: Vec<String>,
}

impl CompareReport {
    pub fn to_text(&self, baseline: &Selector, candidate: &Selector) -> String {
        let mut out = format!(
            "speedup = {} samples/s over {} samples/s\n",
            candidate, baseline
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{}  baseline={:.2}  candidate={:.2}  speedup={:.2}x\n",
                row.config, row.baseline_sps, row.candidate_sps, row.speedup
            ));
        }
        for missing in &self.unmatched {
            out.push_str(&format!("unmatched: {}\n", missing));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,baseline_sps,candidate_sps,speedup\n");
        for row in &self.rows {
            out.push_str(&format!(
                "\"{}\",{},{},{}\n",
                row.config, row.baseline_sps, row.candidate_sps, row.speedup
            ));
        }
        out
    }
}

/// Pairs aggregate rows of two strategies over matching configurations and
/// computes per-config speedups (candidate over baseline).
pub fn compare_records(
    records: &[MetricsRecord],
    baseline: &Selector,
    candidate: &Selector,
) -> CompareReport {
    // When neither selector pins the engine, rows pair per engine too.
    let key_includes_fetch = baseline.fetch.is_none() && candidate.fetch.is_none();
    let key = |r: &MetricsRecord| {
        if key_includes_fetch {
            format!("{} fetch={}", r.config_key(), r.fetch)
        } else {
            r.config_key()
        }
    };

    let mut report = CompareReport::default();
    let collect = |selector: &Selector, side: &str, report: &mut CompareReport| {
        let mut map = std::collections::BTreeMap::new();
        for record in records {
            if record.is_aggregate() && selector.matches(record) {
                if map.insert(key(record), record.clone()).is_some() {
                    report
                        .unmatched
                        .push(format!("{side} {selector}: duplicate rows for `{}`", key(record)));
                }
            }
        }
        map
    };
    let base_rows = collect(baseline, "baseline", &mut report);
    let cand_rows = collect(candidate, "candidate", &mut report);

    for (k, base) in &base_rows {
        match cand_rows.get(k) {
            Some(cand) => report.rows.push(CompareRow {
                config: k.clone(),
                baseline_sps: base.samples_per_second,
                candidate_sps: cand.samples_per_second,
                speedup: cand.samples_per_second / base.samples_per_second,
            }),
            None => report
                .unmatched
                .push(format!("baseline-only config `{k}`")),
        }
    }
    for k in cand_rows.keys() {
        if !base_rows.contains_key(k) {
            report.unmatched.push(format!("candidate-only config `{k}`"));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::FileFormat;
    use crate::synth::{generate_dataset, GenSpec, PayloadKind};

    fn tiny_dataset(dir: &std::path::Path) -> PathBuf {
        let path = dir.join("tiny.data");
        generate_dataset(
            &GenSpec {
                samples: 512,
                payload: PayloadKind::Opaque { sample_bytes: 32 },
                samples_per_chunk: 16,
                seed: 1,
            },
            FileFormat::Indexable,
            &path,
        )
        .unwrap();
        path
    }

    fn quick_config(dataset: PathBuf) -> BenchConfig {
        BenchConfig {
            batch_size: 16,
            steps: 4,
            warmup_steps: 1,
            repeats: 2,
            concurrency: 4,
            ..BenchConfig::new(dataset)
        }
    }

    #[test]
    fn emits_per_repeat_rows_plus_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let records = run_bench(&quick_config(tiny_dataset(dir.path()))).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].repeat, "0");
        assert_eq!(records[1].repeat, "1");
        assert_eq!(records[2].repeat, "mean");
        for r in &records[..2] {
            // samples counted == steps x batch_size
            let samples = r.samples_per_second * r.wall_time_s;
            assert!((samples - 64.0).abs() < 1e-6);
        }
    }

    #[test]
    fn compute_phase_adds_loading_only_twin() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(tiny_dataset(dir.path()));
        config.repeats = 1;
        config.simulated_compute = Duration::from_millis(2);
        let records = run_bench(&config).unwrap();
        let phases: Vec<&str> = records.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(phases, vec!["end_to_end", "end_to_end", "loading_only", "loading_only"]);
        // consume time is recorded only in the end-to-end phase
        assert!(records[0].consume_s > 0.0);
        assert_eq!(records[2].consume_s, 0.0);
    }

    #[test]
    fn oversized_batch_fails_validation_before_measurement() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(tiny_dataset(dir.path()));
        config.batch_size = 1024;
        assert!(matches!(
            run_bench(&config),
            Err(BenchError::Validation(_))
        ));
    }

    #[test]
    fn workers_shard_and_sum_throughput() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(tiny_dataset(dir.path()));
        config.workers = 2;
        config.repeats = 1;
        let records = run_bench(&config).unwrap();
        assert_eq!(records[0].workers, 2);
        let samples = records[0].samples_per_second * records[0].wall_time_s;
        // summed throughput x max wall >= total samples
        assert!(samples >= 128.0 - 1e-6);
    }

    #[test]
    fn selector_parsing() {
        let s: Selector = "indices-mapping:unordered".parse().unwrap();
        assert_eq!(s.mode, ShuffleMode::IndicesMapping);
        assert_eq!(s.fetch, Some(FetchKind::Unordered));
        let s: Selector = "buffered".parse().unwrap();
        assert_eq!(s.fetch, None);
        assert!("nope".parse::<Selector>().is_err());
        assert!("sequential:sideways".parse::<Selector>().is_err());
    }

    #[test]
    fn self_comparison_is_unity() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(tiny_dataset(dir.path()));
        config.repeats = 1;
        let records = run_bench(&config).unwrap();
        let sel: Selector = "indices-mapping:unordered".parse().unwrap();
        let report = compare_records(&records, &sel, &sel);
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].speedup, 1.0);
        assert!(report.unmatched.is_empty());
    }

    #[test]
    fn unmatched_configs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(tiny_dataset(dir.path()));
        config.repeats = 1;
        let mut records = run_bench(&config).unwrap();
        config.mode = ShuffleMode::Sequential;
        config.batch_size = 8; // different config: no pairing possible
        records.extend(run_bench(&config).unwrap());
        let baseline: Selector = "indices-mapping".parse().unwrap();
        let candidate: Selector = "sequential".parse().unwrap();
        let report = compare_records(&records, &baseline, &candidate);
        assert!(report.rows.is_empty());
        assert_eq!(report.unmatched.len(), 2);
    }
}
