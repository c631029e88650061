//! Deterministic synthetic dataset generation for benchmarks and tests.
//!
//! Two payload flavors: opaque random bytes (pure I/O benchmarking) and
//! encoded [`SyntheticSample`] vectors for the training demonstrator.
//! Generation is a pure function of the seed, so the same invocation
//! always produces byte-identical files.

use std::path::Path;

use crate::format::{
    write_indexable_dataset, write_stream_dataset, ChunkingConfig, FileFormat, FormatError,
    WriteStats,
};
use crate::rng::Xoshiro256StarStar;
use crate::trainer::SyntheticSample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PayloadKind {
    /// Fixed-size random payloads.
    Opaque { sample_bytes: u64 },
    /// Encoded linear-model samples: x in [-1, 1)^dim, y = theta* . x for
    /// a hidden theta* drawn from the seed. With `sorted_by_target`, the
    /// dataset is written in ascending-y order, which gives sequential
    /// loading a strongly autocorrelated loss trace to contrast against
    /// shuffled loading.
    Linear { dim: usize, sorted_by_target: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenSpec {
    pub samples: u64,
    pub payload: PayloadKind,
    pub samples_per_chunk: u64,
    pub seed: u64,
}

impl GenSpec {
    pub fn sample_bytes(&self) -> u64 {
        match self.payload {
            PayloadKind::Opaque { sample_bytes } => sample_bytes,
            PayloadKind::Linear { dim, .. } => SyntheticSample::payload_bytes(dim),
        }
    }

    pub fn chunking(&self) -> ChunkingConfig {
        ChunkingConfig::fixed(self.sample_bytes(), self.samples_per_chunk)
    }
}

/// Generates `spec.samples` deterministic linear-model samples.
pub fn linear_samples(n: u64, dim: usize, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = Xoshiro256StarStar::seed_from(seed);
    let theta_star: Vec<f64> = (0..dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            let y = x.iter().zip(&theta_star).map(|(a, b)| a * b).sum();
            SyntheticSample { x, y }
        })
        .collect()
}

/// Writes the synthetic dataset described by `spec` to `path`.
pub fn generate_dataset(
    spec: &GenSpec,
    format: FileFormat,
    path: &Path,
) -> Result<WriteStats, FormatError> {
    let chunking = spec.chunking();
    match spec.payload {
        PayloadKind::Opaque { sample_bytes } => {
            let mut rng = Xoshiro256StarStar::seed_from(spec.seed);
            let mut buf = vec![0u8; sample_bytes as usize];
            let samples = (0..spec.samples).map(move |_| {
                rng.fill_bytes(&mut buf);
                buf.clone()
            });
            write_any(path, format, samples, chunking)
        }
        PayloadKind::Linear {
            dim,
            sorted_by_target,
        } => {
            let mut samples = linear_samples(spec.samples, dim, spec.seed);
            if sorted_by_target {
                samples.sort_by(|a, b| a.y.total_cmp(&b.y));
            }
            write_any(path, format, samples.iter().map(|s| s.encode()), chunking)
        }
    }
}

fn write_any<I, P>(
    path: &Path,
    format: FileFormat,
    samples: I,
    chunking: ChunkingConfig,
) -> Result<WriteStats, FormatError>
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    match format {
        FileFormat::Stream => write_stream_dataset(path, samples, chunking),
        FileFormat::Indexable => write_indexable_dataset(path, samples, chunking).map(|(_, s)| s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::iterate_stream;

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            samples: 100,
            payload: PayloadKind::Opaque { sample_bytes: 64 },
            samples_per_chunk: 16,
            seed: 11,
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_dataset(&spec, FileFormat::Indexable, &a).unwrap();
        generate_dataset(&spec, FileFormat::Indexable, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let spec2 = GenSpec { seed: 12, ..spec };
        let c = dir.path().join("c");
        generate_dataset(&spec2, FileFormat::Indexable, &c).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn linear_payloads_decode_and_sort_by_target() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            samples: 50,
            payload: PayloadKind::Linear {
                dim: 4,
                sorted_by_target: true,
            },
            samples_per_chunk: 8,
            seed: 5,
        };
        let path = dir.path().join("lin");
        generate_dataset(&spec, FileFormat::Stream, &path).unwrap();
        let ys: Vec<f64> = iterate_stream(&path)
            .unwrap()
            .map(|r| SyntheticSample::decode(&r.unwrap().payload).unwrap().y)
            .collect();
        assert_eq!(ys.len(), 50);
        assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn file_size_scales_linearly_with_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut sizes = Vec::new();
        for (i, n) in [1000u64, 10_000].into_iter().enumerate() {
            let spec = GenSpec {
                samples: n,
                payload: PayloadKind::Opaque { sample_bytes: 100 },
                samples_per_chunk: 100,
                seed: 3,
            };
            let path = dir.path().join(format!("s{i}"));
            let stats = generate_dataset(&spec, FileFormat::Stream, &path).unwrap();
            sizes.push(stats.bytes_written as f64);
        }
        let ratio = sizes[1] / sizes[0];
        assert!((9.5..10.5).contains(&ratio), "size ratio {ratio}");
    }
}
