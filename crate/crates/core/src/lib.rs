//! Storage-to-batch data loading with global shuffling.
//!
//! The crate is split along the control-plane / data-plane boundary:
//!
//! - [`format`] — the data plane: two on-disk dataset containers (a
//!   forward-only stream format and an indexable format with a footer chunk
//!   index), a bounded-memory converter between them, and interference-free
//!   concurrent reads through [`format::DatasetHandle`].
//! - [`sampler`] — epoch shuffle orders: seeded global permutations,
//!   a buffered-shuffle baseline, a sequential baseline, batch partitioning,
//!   and strided worker sharding.
//! - [`fetch`] — the control plane: assembles batches by fetching
//!   intra-batch samples concurrently in completion order, with
//!   preprocessing overlapped per sample, next to a strictly ordered serial
//!   baseline.
//! - [`trainer`] — a linear least-squares consumer whose batch reduction is
//!   order-independent by construction, making ordered/unordered loading
//!   equivalence a bit-exact property.
//! - [`bench`] / [`metrics`] — the measurement harness behind the CLI:
//!   dataset synthesis, throughput runs, per-stage timing, CSV/JSON
//!   reporting, and speedup comparison.

pub mod bench;
pub mod fetch;
pub mod format;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use fetch::{
    epoch_loader, generate_batch_ordered, generate_batch_unordered, AssembledBatch, Assembly,
    ErrorMode, FetchConfig, FetchError, FetchKind, SampleSource,
};
pub use format::{
    convert_stream_to_indexable, iterate_stream, open_indexable, open_indexable_with,
    write_indexable_dataset, write_stream_dataset, ChunkingConfig, DatasetHandle, DatasetManifest,
    FileFormat, FormatError, ReadOptions, SampleEncoding, SampleRecord, SchemaDescriptor,
};
pub use metrics::{MetricsRecord, StageMeter};
pub use sampler::{
    buffered_shuffle_order, make_permutation, partition_batches, sequential_order,
    shard_for_worker, BatchSpec, EpochPlan, SamplerError, ShuffleMode, ShuffleSpec,
};
pub use trainer::{
    batch_reduce, per_sample_loss_grad, sgd_step, train_epochs, BatchGradient, ModelState,
    SyntheticSample, TrainerError,
};
