//! The control plane: turns a [`BatchSpec`] into an [`AssembledBatch`].
//!
//! Two engines are provided. The ordered baseline fetches intra-batch
//! samples one at a time in requested order. The unordered engine fans the
//! batch out across a pool of worker threads, so up to
//! `max_concurrent_fetches` reads are in flight at once and each sample is
//! preprocessed on its own worker the moment it arrives, overlapping
//! preprocessing with the I/O of the remaining samples. Only intra-batch
//! order is relaxed; [`epoch_loader`] always yields batches in ordinal
//! order.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::format::{DatasetHandle, FormatError};
use crate::metrics::StageMeter;
use crate::sampler::{BatchSpec, EpochPlan};

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("fetching sample {global_index}: {source}")]
    Fetch {
        global_index: u64,
        #[source]
        source: FormatError,
    },
    #[error("preprocessing sample {global_index}: {message}")]
    Preprocess { global_index: u64, message: String },
}

/// Anything the control plane can pull samples from. Implementations must
/// tolerate concurrent `fetch_sample` calls on distinct (or equal) indices.
pub trait SampleSource: Send + Sync {
    fn total_samples(&self) -> u64;

    /// Returns the raw payload of one sample.
    fn fetch_sample(&self, global_index: u64) -> Result<Vec<u8>, FormatError>;

    /// Stage instrumentation sink, when the source carries one.
    fn meter(&self) -> Option<&StageMeter> {
        None
    }
}

impl SampleSource for DatasetHandle {
    fn total_samples(&self) -> u64 {
        DatasetHandle::total_samples(self)
    }

    fn fetch_sample(&self, global_index: u64) -> Result<Vec<u8>, FormatError> {
        self.get_sample(global_index).map(|record| record.payload)
    }

    fn meter(&self) -> Option<&StageMeter> {
        Some(DatasetHandle::meter(self))
    }
}

/// Per-sample transformation applied between fetch and assembly. Must be
/// deterministic and safe to call concurrently on distinct samples.
pub type PreprocessFn = Arc<dyn Fn(u64, Vec<u8>) -> Result<Vec<u8>, String> + Send + Sync>;

pub fn identity_preprocess() -> PreprocessFn {
    Arc::new(|_, payload| Ok(payload))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assembly {
    /// Samples appear in completion order (maximum overlap; the default).
    ArrivalOrder,
    /// Samples appear in requested order regardless of completion order.
    SlotOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMode {
    /// A failed batch terminates the epoch stream (default).
    FailFast,
    /// A failed batch is reported and the stream continues.
    SkipAndReport,
}

/// Which batch engine drives an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchKind {
    Ordered,
    Unordered,
}

impl std::fmt::Display for FetchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FetchKind::Ordered => write!(f, "ordered"),
            FetchKind::Unordered => write!(f, "unordered"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FetchConfig {
    /// Upper bound on simultaneously in-flight sample fetches.
    pub max_concurrent_fetches: usize,
    /// Completed batches the loader may buffer beyond the one in progress.
    pub prefetch_depth: usize,
    pub assembly: Assembly,
    pub on_error: ErrorMode,
    /// Per-sample read delay the harness plants into the data plane (the
    /// handle applies it inside the chunk read; see `ReadOptions`).
    pub synthetic_read_latency: Duration,
}

impl Default for FetchConfig {
    fn default() -> Self {
        let hw = thread::available_parallelism().map(|p| p.get()).unwrap_or(1);
        Self {
            max_concurrent_fetches: 4 * hw,
            prefetch_depth: 0,
            assembly: Assembly::ArrivalOrder,
            on_error: ErrorMode::FailFast,
            synthetic_read_latency: Duration::ZERO,
        }
    }
}

impl FetchConfig {
    /// Default worker sizing: one worker per intra-batch sample, capped at
    /// four per hardware thread to bound oversubscription.
    pub fn for_batch_size(batch_size: u64) -> Self {
        let base = Self::default();
        Self {
            max_concurrent_fetches: base.max_concurrent_fetches.min(batch_size.max(1) as usize),
            ..base
        }
    }
}

/// One preprocessed sample inside an assembled batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedSample {
    pub global_index: u64,
    pub payload: Vec<u8>,
}

/// A fetched, preprocessed batch plus its arrival-order audit trail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledBatch {
    pub batch_ordinal: u64,
    pub samples: Vec<FetchedSample>,
    /// The indices that were requested, in requested order.
    pub requested: Vec<u64>,
    /// Global indices in the order their fetch+preprocess completed.
    pub arrival_order: Vec<u64>,
}

impl AssembledBatch {
    /// Samples sorted by global index; the canonical order-independent view.
    pub fn sorted_by_index(&self) -> Vec<FetchedSample> {
        let mut sorted = self.samples.clone();
        sorted.sort_by_key(|s| s.global_index);
        sorted
    }
}

/// Serial fetch in requested order; the conventional baseline.
pub fn generate_batch_ordered(
    source: &dyn SampleSource,
    spec: &BatchSpec,
    preprocess: &PreprocessFn,
) -> Result<AssembledBatch, FetchError> {
    let meter = source.meter();
    let mut samples = Vec::with_capacity(spec.indices.len());
    for &global_index in &spec.indices {
        if let Some(m) = meter {
            m.fetch_enter();
        }
        let fetched = source.fetch_sample(global_index);
        if let Some(m) = meter {
            m.fetch_exit();
        }
        let payload = fetched.map_err(|source| FetchError::Fetch {
            global_index,
            source,
        })?;
        let payload = run_preprocess(preprocess, global_index, payload, meter)?;
        samples.push(FetchedSample {
            global_index,
            payload,
        });
    }
    let assemble_start = Instant::now();
    let batch = AssembledBatch {
        batch_ordinal: spec.batch_ordinal,
        requested: spec.indices.clone(),
        arrival_order: spec.indices.clone(),
        samples,
    };
    if let Some(m) = meter {
        m.add_assemble(assemble_start.elapsed());
    }
    Ok(batch)
}

/// Concurrent fetch: up to `max_concurrent_fetches` samples in flight,
/// each preprocessed on arrival. The (index, payload) multiset equals the
/// ordered baseline's; with `max_concurrent_fetches == 1` and `SlotOrder`
/// assembly the result is bit-identical to it.
pub fn generate_batch_unordered(
    source: &dyn SampleSource,
    spec: &BatchSpec,
    config: &FetchConfig,
    preprocess: &PreprocessFn,
) -> Result<AssembledBatch, FetchError> {
    let n = spec.indices.len();
    let workers = config.max_concurrent_fetches.max(1).min(n.max(1));
    if workers <= 1 {
        let mut batch = generate_batch_ordered(source, spec, preprocess)?;
        batch.batch_ordinal = spec.batch_ordinal;
        return Ok(batch);
    }

    let meter = source.meter();
    let next_task = AtomicUsize::new(0);
    let cancel = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Result<(usize, u64, Vec<u8>), FetchError>>();

    let (slots, arrival) = thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next_task = &next_task;
            let cancel = &cancel;
            scope.spawn(move || loop {
                let task = next_task.fetch_add(1, Ordering::SeqCst);
                if task >= n || cancel.load(Ordering::SeqCst) {
                    break;
                }
                let global_index = spec.indices[task];
                if let Some(m) = meter {
                    m.fetch_enter();
                }
                let fetched = source.fetch_sample(global_index);
                if let Some(m) = meter {
                    m.fetch_exit();
                }
                let message = match fetched {
                    Err(source) => Err(FetchError::Fetch {
                        global_index,
                        source,
                    }),
                    Ok(payload) => run_preprocess(preprocess, global_index, payload, meter)
                        .map(|p| (task, global_index, p)),
                };
                let failed = message.is_err();
                if failed {
                    cancel.store(true, Ordering::SeqCst);
                }
                if tx.send(message).is_err() || failed {
                    break;
                }
            });
        }
        drop(tx);

        // Receive in completion order; the channel preserves send order,
        // which is each sample's preprocess-done instant.
        let mut slots: Vec<Option<Vec<u8>>> = (0..n).map(|_| None).collect();
        let mut arrival: Vec<(usize, u64)> = Vec::with_capacity(n);
        let mut first_error = None;
        for message in rx {
            match message {
                Ok((task, global_index, payload)) => {
                    slots[task] = Some(payload);
                    arrival.push((task, global_index));
                }
                Err(e) => {
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                }
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok((slots, arrival)),
        }
    })?;

    let assemble_start = Instant::now();
    let arrival_order: Vec<u64> = arrival.iter().map(|&(_, idx)| idx).collect();
    let mut slots = slots;
    let samples: Vec<FetchedSample> = match config.assembly {
        Assembly::ArrivalOrder => arrival
            .iter()
            .map(|&(task, global_index)| FetchedSample {
                global_index,
                payload: slots[task].take().expect("completed task has a payload"),
            })
            .collect(),
        Assembly::SlotOrder => slots
            .iter_mut()
            .zip(&spec.indices)
            .map(|(slot, &global_index)| FetchedSample {
                global_index,
                payload: slot.take().expect("completed task has a payload"),
            })
            .collect(),
    };
    let batch = AssembledBatch {
        batch_ordinal: spec.batch_ordinal,
        requested: spec.indices.clone(),
        arrival_order,
        samples,
    };
    if let Some(m) = meter {
        m.add_assemble(assemble_start.elapsed());
    }
    Ok(batch)
}

fn run_preprocess(
    preprocess: &PreprocessFn,
    global_index: u64,
    payload: Vec<u8>,
    meter: Option<&StageMeter>,
) -> Result<Vec<u8>, FetchError> {
    let start = Instant::now();
    let result = preprocess(global_index, payload);
    if let Some(m) = meter {
        m.add_preprocess(start.elapsed());
    }
    result.map_err(|message| FetchError::Preprocess {
        global_index,
        message,
    })
}

/// Streams an epoch's batches in ordinal order with bounded prefetch.
///
/// At most `prefetch_depth` completed batches are buffered beyond the one
/// being generated, enforced structurally by the rendezvous channel: with
/// depth 0, batch `k+1` is not started until batch `k` has been yielded.
pub struct EpochLoader {
    rx: Option<Receiver<Result<AssembledBatch, FetchError>>>,
    driver: Option<JoinHandle<()>>,
    cancel: Arc<AtomicBool>,
}

pub fn epoch_loader(
    source: Arc<dyn SampleSource>,
    plan: EpochPlan,
    kind: FetchKind,
    config: FetchConfig,
    preprocess: PreprocessFn,
) -> EpochLoader {
    let (tx, rx) = mpsc::sync_channel(config.prefetch_depth);
    let cancel = Arc::new(AtomicBool::new(false));
    let driver_cancel = Arc::clone(&cancel);
    let driver = thread::spawn(move || {
        drive_epoch(source, plan, kind, config, preprocess, tx, driver_cancel)
    });
    EpochLoader {
        rx: Some(rx),
        driver: Some(driver),
        cancel,
    }
}

fn drive_epoch(
    source: Arc<dyn SampleSource>,
    plan: EpochPlan,
    kind: FetchKind,
    config: FetchConfig,
    preprocess: PreprocessFn,
    tx: SyncSender<Result<AssembledBatch, FetchError>>,
    cancel: Arc<AtomicBool>,
) {
    for spec in plan.batches() {
        if cancel.load(Ordering::SeqCst) {
            break;
        }
        let result = match kind {
            FetchKind::Ordered => generate_batch_ordered(source.as_ref(), &spec, &preprocess),
            FetchKind::Unordered => {
                generate_batch_unordered(source.as_ref(), &spec, &config, &preprocess)
            }
        };
        let failed = result.is_err();
        if tx.send(result).is_err() {
            break; // consumer went away
        }
        if failed && config.on_error == ErrorMode::FailFast {
            break;
        }
    }
}

impl Iterator for EpochLoader {
    type Item = Result<AssembledBatch, FetchError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref().and_then(|rx| rx.recv().ok())
    }
}

impl Drop for EpochLoader {
    fn drop(&mut self) {
        self.cancel.store(true, Ordering::SeqCst);
        // Unblock a driver parked in send(), then reap it.
        drop(self.rx.take());
        if let Some(driver) = self.driver.take() {
            let _ = driver.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::Mutex;

    /// In-memory source: payload of index i is i's little-endian bytes
    /// repeated. Optionally fails specific indices once.
    struct TestSource {
        n: u64,
        meter: StageMeter,
        fail_once: Mutex<HashMap<u64, bool>>,
    }

    impl TestSource {
        fn new(n: u64) -> Self {
            Self {
                n,
                meter: StageMeter::default(),
                fail_once: Mutex::new(HashMap::new()),
            }
        }

        fn fail_index_once(self, index: u64) -> Self {
            self.fail_once.lock().unwrap().insert(index, true);
            self
        }

        fn payload_for(i: u64) -> Vec<u8> {
            i.to_le_bytes().repeat(2)
        }
    }

    impl SampleSource for TestSource {
        fn total_samples(&self) -> u64 {
            self.n
        }

        fn fetch_sample(&self, global_index: u64) -> Result<Vec<u8>, FormatError> {
            if global_index >= self.n {
                return Err(FormatError::SampleOutOfRange {
                    index: global_index,
                    total: self.n,
                });
            }
            if let Some(pending) = self.fail_once.lock().unwrap().get_mut(&global_index) {
                if *pending {
                    *pending = false;
                    return Err(FormatError::TruncatedChunk { offset: 0 });
                }
            }
            Ok(Self::payload_for(global_index))
        }

        fn meter(&self) -> Option<&StageMeter> {
            Some(&self.meter)
        }
    }

    fn spec(indices: Vec<u64>) -> BatchSpec {
        BatchSpec {
            batch_ordinal: 0,
            indices,
        }
    }

    fn config(workers: usize, assembly: Assembly) -> FetchConfig {
        FetchConfig {
            max_concurrent_fetches: workers,
            assembly,
            ..FetchConfig::default()
        }
    }

    #[test]
    fn ordered_preserves_requested_order() {
        let source = TestSource::new(16);
        let batch =
            generate_batch_ordered(&source, &spec(vec![7, 2, 9]), &identity_preprocess()).unwrap();
        let indices: Vec<u64> = batch.samples.iter().map(|s| s.global_index).collect();
        assert_eq!(indices, vec![7, 2, 9]);
        assert_eq!(batch.arrival_order, vec![7, 2, 9]);
        assert_eq!(batch.samples[0].payload, TestSource::payload_for(7));
    }

    #[test]
    fn unordered_multiset_matches_ordered() {
        let source = TestSource::new(64);
        let indices: Vec<u64> = vec![5, 63, 1, 40, 22, 13, 2, 8];
        let ordered =
            generate_batch_ordered(&source, &spec(indices.clone()), &identity_preprocess())
                .unwrap();
        let unordered = generate_batch_unordered(
            &source,
            &spec(indices),
            &config(4, Assembly::ArrivalOrder),
            &identity_preprocess(),
        )
        .unwrap();
        assert_eq!(ordered.sorted_by_index(), unordered.sorted_by_index());
        assert_eq!(unordered.arrival_order.len(), 8);
        assert_eq!(unordered.samples.len(), 8);
    }

    #[test]
    fn singleton_batch_is_engine_invariant() {
        let source = TestSource::new(4);
        let ordered =
            generate_batch_ordered(&source, &spec(vec![3]), &identity_preprocess()).unwrap();
        for assembly in [Assembly::ArrivalOrder, Assembly::SlotOrder] {
            let unordered = generate_batch_unordered(
                &source,
                &spec(vec![3]),
                &config(8, assembly),
                &identity_preprocess(),
            )
            .unwrap();
            assert_eq!(ordered, unordered);
        }
    }

    #[test]
    fn degenerate_concurrency_with_slot_order_is_bit_identical() {
        let source = TestSource::new(32);
        let indices: Vec<u64> = vec![9, 0, 31, 4, 17];
        let ordered =
            generate_batch_ordered(&source, &spec(indices.clone()), &identity_preprocess())
                .unwrap();
        let unordered = generate_batch_unordered(
            &source,
            &spec(indices),
            &config(1, Assembly::SlotOrder),
            &identity_preprocess(),
        )
        .unwrap();
        assert_eq!(ordered, unordered);
    }

    #[test]
    fn slot_order_assembly_matches_requested_slots() {
        let source = TestSource::new(32);
        let indices: Vec<u64> = vec![20, 3, 11, 30];
        let batch = generate_batch_unordered(
            &source,
            &spec(indices.clone()),
            &config(4, Assembly::SlotOrder),
            &identity_preprocess(),
        )
        .unwrap();
        let got: Vec<u64> = batch.samples.iter().map(|s| s.global_index).collect();
        assert_eq!(got, indices);
    }

    #[test]
    fn preprocess_runs_per_sample() {
        let source = TestSource::new(8);
        let double: PreprocessFn = Arc::new(|_, mut p| {
            let copy = p.clone();
            p.extend_from_slice(&copy);
            Ok(p)
        });
        let batch =
            generate_batch_unordered(&source, &spec(vec![1, 2]), &config(2, Assembly::SlotOrder), &double)
                .unwrap();
        assert_eq!(batch.samples[0].payload, TestSource::payload_for(1).repeat(2));
    }

    #[test]
    fn fetch_error_cancels_and_reports_index() {
        let source = TestSource::new(64).fail_index_once(13);
        let indices: Vec<u64> = (0..32).collect();
        let err = generate_batch_unordered(
            &source,
            &spec(indices.clone()),
            &config(4, Assembly::ArrivalOrder),
            &identity_preprocess(),
        )
        .unwrap_err();
        assert!(matches!(err, FetchError::Fetch { global_index: 13, .. }));
        // The failure consumed the one-shot fault; the same batch now works.
        let ok = generate_batch_unordered(
            &source,
            &spec(indices),
            &config(4, Assembly::ArrivalOrder),
            &identity_preprocess(),
        )
        .unwrap();
        assert_eq!(ok.samples.len(), 32);
    }

    #[test]
    fn preprocess_error_reports_index() {
        let source = TestSource::new(8);
        let failing: PreprocessFn = Arc::new(|idx, p| {
            if idx == 5 {
                Err("boom".into())
            } else {
                Ok(p)
            }
        });
        let err = generate_batch_unordered(
            &source,
            &spec(vec![4, 5, 6]),
            &config(2, Assembly::ArrivalOrder),
            &failing,
        )
        .unwrap_err();
        assert!(matches!(err, FetchError::Preprocess { global_index: 5, .. }));
    }

    #[test]
    fn in_flight_fetches_never_exceed_limit() {
        let source = TestSource::new(256);
        let indices: Vec<u64> = (0..256).collect();
        for workers in [1usize, 2, 4, 8] {
            let batch = generate_batch_unordered(
                &source,
                &spec(indices.clone()),
                &config(workers, Assembly::ArrivalOrder),
                &identity_preprocess(),
            )
            .unwrap();
            assert_eq!(batch.samples.len(), 256);
            assert!(source.meter.snapshot().peak_in_flight <= workers as u64);
            source.meter.reset_peak();
        }
    }

    #[test]
    fn loader_yields_batches_in_ordinal_order() {
        let source = Arc::new(TestSource::new(100));
        let plan = EpochPlan::new(
            &crate::sampler::ShuffleSpec::indices_mapping(3, 0),
            100,
            16,
            false,
            0,
            1,
        )
        .unwrap();
        let loader = epoch_loader(
            source,
            plan.clone(),
            FetchKind::Unordered,
            config(4, Assembly::ArrivalOrder),
            identity_preprocess(),
        );
        let batches: Vec<_> = loader.map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 7);
        for (i, batch) in batches.iter().enumerate() {
            assert_eq!(batch.batch_ordinal, i as u64);
        }
        let mut seen: Vec<u64> = batches
            .iter()
            .flat_map(|b| b.samples.iter().map(|s| s.global_index))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<u64>>());
    }

    #[test]
    fn fail_fast_ends_stream_and_skip_mode_continues() {
        let plan = EpochPlan::new(
            &crate::sampler::ShuffleSpec::sequential(),
            40,
            10,
            false,
            0,
            1,
        )
        .unwrap();

        // fail-fast: the stream ends after the failed batch
        let source = Arc::new(TestSource::new(40).fail_index_once(15));
        let loader = epoch_loader(
            source,
            plan.clone(),
            FetchKind::Unordered,
            config(2, Assembly::ArrivalOrder),
            identity_preprocess(),
        );
        let results: Vec<_> = loader.collect();
        assert_eq!(results.len(), 2);
        assert!(results[0].is_ok());
        assert!(results[1].is_err());

        // skip-and-report: the error is yielded, later batches succeed
        let source = Arc::new(TestSource::new(40).fail_index_once(15));
        let mut cfg = config(2, Assembly::ArrivalOrder);
        cfg.on_error = ErrorMode::SkipAndReport;
        let loader = epoch_loader(
            source,
            plan,
            FetchKind::Unordered,
            cfg,
            identity_preprocess(),
        );
        let results: Vec<_> = loader.collect();
        assert_eq!(results.len(), 4);
        assert!(results[0].is_ok());
        assert!(results[1].is_err());
        assert!(results[2].is_ok());
        assert!(results[3].is_ok());
    }

    #[test]
    fn dropping_loader_mid_epoch_shuts_down_cleanly() {
        let source = Arc::new(TestSource::new(1000));
        let plan = EpochPlan::new(
            &crate::sampler::ShuffleSpec::indices_mapping(1, 0),
            1000,
            10,
            false,
            0,
            1,
        )
        .unwrap();
        let mut loader = epoch_loader(
            source,
            plan,
            FetchKind::Unordered,
            config(4, Assembly::ArrivalOrder),
            identity_preprocess(),
        );
        let first = loader.next().unwrap().unwrap();
        assert_eq!(first.batch_ordinal, 0);
        drop(loader); // must not hang or panic
    }
}
