//! Run metrics: per-stage timing instrumentation and the CSV/JSON records
//! emitted by the benchmark harness.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Thread-safe accumulator for per-stage durations and read bytes.
///
/// Stages run on overlapping worker threads, so their totals can sum past
/// wall time; each total is the aggregate busy time of that stage across
/// all threads.
#[derive(Debug, Default)]
pub struct StageMeter {
    index_lookup_ns: AtomicU64,
    read_ns: AtomicU64,
    decode_ns: AtomicU64,
    preprocess_ns: AtomicU64,
    assemble_ns: AtomicU64,
    consume_ns: AtomicU64,
    bytes_read: AtomicU64,
    fetches_in_flight: AtomicU64,
    peak_in_flight: AtomicU64,
}

macro_rules! stage_adder {
    ($name:ident, $field:ident) => {
        pub fn $name(&self, elapsed: Duration) {
            self.$field
                .fetch_add(elapsed.as_nanos() as u64, Ordering::Relaxed);
        }
    };
}

impl StageMeter {
    stage_adder!(add_index_lookup, index_lookup_ns);
    stage_adder!(add_read, read_ns);
    stage_adder!(add_decode, decode_ns);
    stage_adder!(add_preprocess, preprocess_ns);
    stage_adder!(add_assemble, assemble_ns);
    stage_adder!(add_consume, consume_ns);

    pub fn add_bytes_read(&self, bytes: u64) {
        self.bytes_read.fetch_add(bytes, Ordering::Relaxed);
    }

    /// Marks one fetch as in flight and updates the high-water mark.
    pub fn fetch_enter(&self) {
        let now = self.fetches_in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    }

    pub fn fetch_exit(&self) {
        self.fetches_in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn in_flight(&self) -> u64 {
        self.fetches_in_flight.load(Ordering::SeqCst)
    }

    /// Clears the in-flight high-water mark (e.g. between warmup and the
    /// measured window).
    pub fn reset_peak(&self) {
        self.peak_in_flight.store(0, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> StageSnapshot {
        StageSnapshot {
            index_lookup_ns: self.index_lookup_ns.load(Ordering::Relaxed),
            read_ns: self.read_ns.load(Ordering::Relaxed),
            decode_ns: self.decode_ns.load(Ordering::Relaxed),
            preprocess_ns: self.preprocess_ns.load(Ordering::Relaxed),
            assemble_ns: self.assemble_ns.load(Ordering::Relaxed),
            consume_ns: self.consume_ns.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            peak_in_flight: self.peak_in_flight.load(Ordering::SeqCst),
        }
    }
}

/// Point-in-time copy of a [`StageMeter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageSnapshot {
    pub index_lookup_ns: u64,
    pub read_ns: u64,
    pub decode_ns: u64,
    pub preprocess_ns: u64,
    pub assemble_ns: u64,
    pub consume_ns: u64,
    pub bytes_read: u64,
    pub peak_in_flight: u64,
}

impl StageSnapshot {
    /// Stage deltas accumulated since `earlier`. `peak_in_flight` is not a
    /// counter and carries over from `self`.
    pub fn delta_since(&self, earlier: &StageSnapshot) -> StageSnapshot {
        StageSnapshot {
            index_lookup_ns: self.index_lookup_ns - earlier.index_lookup_ns,
            read_ns: self.read_ns - earlier.read_ns,
            decode_ns: self.decode_ns - earlier.decode_ns,
            preprocess_ns: self.preprocess_ns - earlier.preprocess_ns,
            assemble_ns: self.assemble_ns - earlier.assemble_ns,
            consume_ns: self.consume_ns - earlier.consume_ns,
            bytes_read: self.bytes_read - earlier.bytes_read,
            peak_in_flight: self.peak_in_flight,
        }
    }

    pub fn accumulate(&mut self, other: &StageSnapshot) {
        self.index_lookup_ns += other.index_lookup_ns;
        self.read_ns += other.read_ns;
        self.decode_ns += other.decode_ns;
        self.preprocess_ns += other.preprocess_ns;
        self.assemble_ns += other.assemble_ns;
        self.consume_ns += other.consume_ns;
        self.bytes_read += other.bytes_read;
        self.peak_in_flight = self.peak_in_flight.max(other.peak_in_flight);
    }

    pub fn total_stage_time(&self) -> Duration {
        Duration::from_nanos(
            self.index_lookup_ns
                + self.read_ns
                + self.decode_ns
                + self.preprocess_ns
                + self.assemble_ns
                + self.consume_ns,
        )
    }
}

/// One measured benchmark run (or the aggregate of its repeats).
///
/// Column order is fixed by field order here and documented in the README.
/// `repeat` is the repeat index, or `"mean"` for the aggregate row, which
/// also fills `sps_stddev`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mode: String,
    pub fetch: String,
    pub phase: String,
    pub batch_size: u64,
    pub dataset_samples: u64,
    pub steps: u64,
    pub concurrency: u64,
    pub prefetch_depth: u64,
    pub inject_latency_us: u64,
    pub compute_us: u64,
    pub workers: u64,
    pub repeat: String,
    pub wall_time_s: f64,
    pub samples_per_second: f64,
    pub sps_stddev: Option<f64>,
    pub bytes_read: u64,
    pub peak_in_flight: u64,
    pub index_lookup_s: f64,
    pub read_s: f64,
    pub decode_s: f64,
    pub preprocess_s: f64,
    pub assemble_s: f64,
    pub consume_s: f64,
}

impl MetricsRecord {
    pub fn is_aggregate(&self) -> bool {
        self.repeat == "mean"
    }

    /// Key identifying a benchmark configuration, minus the fields that
    /// describe the loading strategy under test (mode/fetch/concurrency/
    /// prefetch). Rows with equal keys are comparable.
    pub fn config_key(&self) -> String {
        format!(
            "phase={} batch={} samples={} steps={} latency_us={} compute_us={} workers={}",
            self.phase,
            self.batch_size,
            self.dataset_samples,
            self.steps,
            self.inject_latency_us,
            self.compute_us,
            self.workers
        )
    }
}

/// Mean-plus-stddev aggregate of per-repeat records sharing one config.
pub fn aggregate_records(records: &[MetricsRecord]) -> MetricsRecord {
    assert!(!records.is_empty());
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let sps_mean = mean(|r| r.samples_per_second);
    let sps_var = records
        .iter()
        .map(|r| (r.samples_per_second - sps_mean).powi(2))
        .sum::<f64>()
        / n;
    MetricsRecord {
        repeat: "mean".to_string(),
        wall_time_s: mean(|r| r.wall_time_s),
        samples_per_second: sps_mean,
        sps_stddev: Some(sps_var.sqrt()),
        bytes_read: (records.iter().map(|r| r.bytes_read).sum::<u64>() as f64 / n) as u64,
        peak_in_flight: records.iter().map(|r| r.peak_in_flight).max().unwrap(),
        index_lookup_s: mean(|r| r.index_lookup_s),
        read_s: mean(|r| r.read_s),
        decode_s: mean(|r| r.decode_s),
        preprocess_s: mean(|r| r.preprocess_s),
        assemble_s: mean(|r| r.assemble_s),
        consume_s: mean(|r| r.consume_s),
        ..records[0].clone()
    }
}

/// Appends records to a CSV file, writing the header only when the file is
/// new or empty.
pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let need_header = file.metadata()?.len() == 0;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(need_header)
        .from_writer(file);
    for record in records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Appends records to a JSON-lines file (one object per line).
pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(repeat: &str, sps: f64) -> MetricsRecord {
        MetricsRecord {
            mode: "indices-mapping".into(),
            fetch: "unordered".into(),
            phase: "loading_only".into(),
            batch_size: 32,
            dataset_samples: 1000,
            steps: 10,
            concurrency: 8,
            prefetch_depth: 0,
            inject_latency_us: 100,
            compute_us: 0,
            workers: 1,
            repeat: repeat.into(),
            wall_time_s: 1.0,
            samples_per_second: sps,
            sps_stddev: None,
            bytes_read: 4096,
            peak_in_flight: 8,
            index_lookup_s: 0.01,
            read_s: 0.9,
            decode_s: 0.05,
            preprocess_s: 0.0,
            assemble_s: 0.01,
            consume_s: 0.0,
        }
    }

    #[test]
    fn csv_round_trips_and_appends_without_duplicate_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_csv(&path, &[record("0", 100.0)]).unwrap();
        write_csv(&path, &[record("1", 110.0)]).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], record("0", 100.0));
        assert_eq!(back[1], record("1", 110.0));
    }

    #[test]
    fn aggregate_computes_mean_and_stddev() {
        let agg = aggregate_records(&[record("0", 90.0), record("1", 110.0)]);
        assert_eq!(agg.repeat, "mean");
        assert_eq!(agg.samples_per_second, 100.0);
        assert_eq!(agg.sps_stddev, Some(10.0));
    }

    #[test]
    fn meter_tracks_peak_in_flight() {
        let meter = StageMeter::default();
        meter.fetch_enter();
        meter.fetch_enter();
        meter.fetch_exit();
        meter.fetch_enter();
        assert_eq!(meter.snapshot().peak_in_flight, 2);
        meter.fetch_exit();
        meter.fetch_exit();
        assert_eq!(meter.in_flight(), 0);
    }

    #[test]
    fn snapshot_delta_subtracts_counters() {
        let meter = StageMeter::default();
        meter.add_read(Duration::from_nanos(500));
        meter.add_bytes_read(10);
        let before = meter.snapshot();
        meter.add_read(Duration::from_nanos(300));
        meter.add_bytes_read(7);
        let delta = meter.snapshot().delta_since(&before);
        assert_eq!(delta.read_ns, 300);
        assert_eq!(delta.bytes_read, 7);
    }

    #[test]
    fn jsonl_emits_one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_jsonl(&path, &[record("0", 1.0), record("1", 2.0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: MetricsRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, record("0", 1.0));
    }
}
