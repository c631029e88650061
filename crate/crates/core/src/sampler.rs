//! Epoch shuffle orders and their partitioning into batches and worker
//! shards.
//!
//! Three order modes are provided: `Sequential` (no shuffling),
//! `IndicesMapping` (a full Fisher-Yates permutation of the index list,
//! i.e. a true global shuffle), and `Buffered` (the classic streaming
//! buffer that trades shuffle quality for sequential reads). Every
//! operation is a pure function of its inputs and deterministic across
//! platforms; the generator stack is pinned in [`crate::rng`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix64, Xoshiro256StarStar, GOLDEN_GAMMA};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("worker_id {worker_id} out of range for world_size {world_size}")]
    InvalidWorker { worker_id: u32, world_size: u32 },
    #[error("world_size must be >= 1")]
    EmptyWorld,
    #[error("batch_size must be >= 1")]
    ZeroBatchSize,
    #[error("buffer_size must be >= 1 in buffered mode")]
    ZeroBufferSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShuffleMode {
    Sequential,
    IndicesMapping,
    Buffered,
}

impl std::fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShuffleMode::Sequential => write!(f, "sequential"),
            ShuffleMode::IndicesMapping => write!(f, "indices-mapping"),
            ShuffleMode::Buffered => write!(f, "buffered"),
        }
    }
}

impl std::str::FromStr for ShuffleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(ShuffleMode::Sequential),
            "indices-mapping" | "indices_mapping" => Ok(ShuffleMode::IndicesMapping),
            "buffered" => Ok(ShuffleMode::Buffered),
            other => Err(format!("unknown shuffle mode `{other}`")),
        }
    }
}

/// How to order one epoch of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleSpec {
    pub mode: ShuffleMode,
    pub seed: u64,
    pub epoch: u64,
    /// Only meaningful in buffered mode; must be >= 1 there.
    pub buffer_size: u64,
}

impl ShuffleSpec {
    pub fn sequential() -> Self {
        Self {
            mode: ShuffleMode::Sequential,
            seed: 0,
            epoch: 0,
            buffer_size: 1,
        }
    }

    pub fn indices_mapping(seed: u64, epoch: u64) -> Self {
        Self {
            mode: ShuffleMode::IndicesMapping,
            seed,
            epoch,
            buffer_size: 1,
        }
    }

    pub fn buffered(seed: u64, epoch: u64, buffer_size: u64) -> Self {
        Self {
            mode: ShuffleMode::Buffered,
            seed,
            epoch,
            buffer_size,
        }
    }

    /// The epoch's full index order before sharding: a permutation of
    /// `[0, n)` in every mode.
    pub fn order(&self, n: u64) -> Result<Vec<u64>, SamplerError> {
        match self.mode {
            ShuffleMode::Sequential => Ok(sequential_order(n)),
            ShuffleMode::IndicesMapping => Ok(make_permutation(n, self.seed, self.epoch)),
            ShuffleMode::Buffered => {
                if self.buffer_size < 1 {
                    return Err(SamplerError::ZeroBufferSize);
                }
                Ok(buffered_shuffle_order(
                    n,
                    epoch_seed(self.seed, self.epoch),
                    self.buffer_size,
                ))
            }
        }
    }
}

/// Derives a decorrelated per-epoch seed from one user seed.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    mix64(seed ^ epoch.wrapping_mul(GOLDEN_GAMMA))
}

pub fn sequential_order(n: u64) -> Vec<u64> {
    (0..n).collect()
}

/// Uniform permutation of `[0, n)` by Fisher-Yates, deterministic in
/// `(n, seed, epoch)`.
pub fn make_permutation(n: u64, seed: u64, epoch: u64) -> Vec<u64> {
    let mut rng = Xoshiro256StarStar::seed_from(epoch_seed(seed, epoch));
    let mut order: Vec<u64> = (0..n).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Streaming-buffer shuffle: fill a buffer with the first `buffer_size`
/// indices, repeatedly emit a uniformly chosen slot and refill it with the
/// next sequential index.
///
/// The output is always a permutation of `[0, n)`, but index `k` can only
/// appear once it has entered the buffer, so `out[k] <= k + buffer_size - 1`
/// for all `k`: the shuffling space is limited by the buffer.
pub fn buffered_shuffle_order(n: u64, seed: u64, buffer_size: u64) -> Vec<u64> {
    assert!(buffer_size >= 1, "buffer_size must be >= 1");
    let mut rng = Xoshiro256StarStar::seed_from(seed);
    let mut buffer: Vec<u64> = (0..n.min(buffer_size)).collect();
    let mut next = buffer.len() as u64;
    let mut out = Vec::with_capacity(n as usize);
    while !buffer.is_empty() {
        let slot = rng.gen_range(buffer.len() as u64) as usize;
        out.push(buffer[slot]);
        if next < n {
            buffer[slot] = next;
            next += 1;
        } else {
            buffer.swap_remove(slot);
        }
    }
    out
}

/// One batch's worth of global indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_ordinal: u64,
    pub indices: Vec<u64>,
}

/// Splits an order into consecutive batches. With `drop_last`, a trailing
/// partial batch is discarded so every batch holds exactly `batch_size`
/// indices.
pub fn partition_batches(order: &[u64], batch_size: u64, drop_last: bool) -> Vec<BatchSpec> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    order
        .chunks(batch_size as usize)
        .filter(|chunk| !drop_last || chunk.len() as u64 == batch_size)
        .enumerate()
        .map(|(i, chunk)| BatchSpec {
            batch_ordinal: i as u64,
            indices: chunk.to_vec(),
        })
        .collect()
}

/// Strided shard for one data-parallel worker: `order[worker_id::world_size]`.
/// Shards are pairwise disjoint and together cover the order exactly.
pub fn shard_for_worker(
    order: &[u64],
    worker_id: u32,
    world_size: u32,
) -> Result<Vec<u64>, SamplerError> {
    if world_size == 0 {
        return Err(SamplerError::EmptyWorld);
    }
    if worker_id >= world_size {
        return Err(SamplerError::InvalidWorker {
            worker_id,
            world_size,
        });
    }
    Ok(order
        .iter()
        .skip(worker_id as usize)
        .step_by(world_size as usize)
        .copied()
        .collect())
}

/// A worker's batched view of one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub order: Vec<u64>,
    pub batch_size: u64,
    pub drop_last: bool,
    pub worker_id: u32,
    pub world_size: u32,
}

impl EpochPlan {
    /// Builds the plan for one worker: epoch order, strided shard, then
    /// batching parameters.
    pub fn new(
        spec: &ShuffleSpec,
        n: u64,
        batch_size: u64,
        drop_last: bool,
        worker_id: u32,
        world_size: u32,
    ) -> Result<Self, SamplerError> {
        if batch_size < 1 {
            return Err(SamplerError::ZeroBatchSize);
        }
        let order = spec.order(n)?;
        let order = shard_for_worker(&order, worker_id, world_size)?;
        Ok(Self {
            order,
            batch_size,
            drop_last,
            worker_id,
            world_size,
        })
    }

    pub fn batches(&self) -> Vec<BatchSpec> {
        partition_batches(&self.order, self.batch_size, self.drop_last)
    }

    pub fn batch_count(&self) -> u64 {
        let n = self.order.len() as u64;
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}
