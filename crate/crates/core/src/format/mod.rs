//! On-disk dataset containers: a sequential stream format and an indexable
//! format with a footer chunk index, plus the conversion between them.
//!
//! The stream format supports forward iteration only. The indexable format
//! adds a fixed-width chunk index at the end of the file, so opening costs
//! header + footer bytes (never a data scan) and any chunk can be fetched
//! with one positional read. Writers are single-owner; an open handle can
//! serve any number of concurrent readers because all reads are positional.

mod convert;
pub mod layout;
mod reader;
mod writer;

pub use convert::{convert_stream_to_indexable, ConversionStats};
pub use reader::{
    iterate_stream, open_indexable, open_indexable_with, probe_format, DatasetHandle, FileFormat,
    RawChunk, RawChunkIter, ReadOptions, StreamIter,
};
pub use writer::{
    write_indexable_dataset, write_stream_dataset, DatasetWriter, WriteStats,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad leading magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown sample encoding byte {0}")]
    UnknownEncoding(u8),
    #[error("no footer index (stream-format file or missing trailing magic)")]
    NoFooterIndex,
    #[error("footer is truncated or inconsistent: {0}")]
    TruncatedFooter(String),
    #[error("chunk {ordinal}: checksum mismatch (expected {expected:#018x}, computed {actual:#018x})")]
    ChecksumMismatch {
        ordinal: u64,
        expected: u64,
        actual: u64,
    },
    #[error("truncated chunk record at byte offset {offset}")]
    TruncatedChunk { offset: u64 },
    #[error("missing end marker; the file was not finalized")]
    MissingEndMarker,
    #[error("sample index {index} out of range ({total} samples)")]
    SampleOutOfRange { index: u64, total: u64 },
    #[error("chunk ordinal {ordinal} out of range ({total} chunks)")]
    ChunkOutOfRange { ordinal: u64, total: u64 },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("manifest invariant violated: {0}")]
    InvalidManifest(String),
    #[error("chunk {ordinal}: malformed payload: {reason}")]
    MalformedChunk { ordinal: u64, reason: String },
}

/// How sample payloads are packed inside a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleEncoding {
    /// Every payload has exactly `fixed_sample_bytes` bytes; payloads are
    /// concatenated back to back.
    FixedSize,
    /// Each payload is preceded by a u32 length, allowing variable sizes.
    LengthPrefixed,
}

impl SampleEncoding {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            SampleEncoding::FixedSize => 0,
            SampleEncoding::LengthPrefixed => 1,
        }
    }

    pub(crate) fn from_byte(byte: u8) -> Result<Self, FormatError> {
        match byte {
            0 => Ok(SampleEncoding::FixedSize),
            1 => Ok(SampleEncoding::LengthPrefixed),
            other => Err(FormatError::UnknownEncoding(other)),
        }
    }
}

/// Fixed-width metadata block at the start of every dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub format_version: u16,
    pub sample_encoding: SampleEncoding,
    /// Payload size of every sample; meaningful only for `FixedSize`.
    pub fixed_sample_bytes: u64,
    pub samples_per_chunk: u64,
    pub total_samples: u64,
    pub total_chunks: u64,
}

impl SchemaDescriptor {
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.samples_per_chunk < 1 {
            return Err(FormatError::InvalidSchema(
                "samples_per_chunk must be >= 1".into(),
            ));
        }
        if self.sample_encoding == SampleEncoding::FixedSize && self.fixed_sample_bytes == 0 {
            return Err(FormatError::InvalidSchema(
                "fixed_sample_bytes must be >= 1 for fixed_size encoding".into(),
            ));
        }
        let expected_chunks = self.total_samples.div_ceil(self.samples_per_chunk);
        if self.total_chunks != expected_chunks {
            return Err(FormatError::InvalidSchema(format!(
                "total_chunks {} != ceil({} / {}) = {}",
                self.total_chunks, self.total_samples, self.samples_per_chunk, expected_chunks
            )));
        }
        Ok(())
    }
}

/// One row of the footer index: where a chunk lives and what it holds.
///
/// `byte_offset` addresses the chunk *record* (its u32 length field);
/// `byte_length` covers the record header plus the payload, so consecutive
/// ranges tile the chunk region exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkIndexEntry {
    pub chunk_ordinal: u64,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub sample_count: u64,
    pub first_global_index: u64,
    pub checksum: u64,
}

impl ChunkIndexEntry {
    /// Offset of the chunk payload (past the record header).
    pub fn payload_offset(&self) -> u64 {
        self.byte_offset + layout::CHUNK_HEADER_LEN
    }

    pub fn payload_len(&self) -> u64 {
        self.byte_length - layout::CHUNK_HEADER_LEN
    }
}

/// Schema plus chunk index: the complete map from global sample indices to
/// byte ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: SchemaDescriptor,
    pub chunk_index: Vec<ChunkIndexEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), FormatError> {
        self.schema.validate()?;
        if self.chunk_index.len() as u64 != self.schema.total_chunks {
            return Err(FormatError::InvalidManifest(format!(
                "chunk index has {} entries, schema declares {}",
                self.chunk_index.len(),
                self.schema.total_chunks
            )));
        }
        let mut samples = 0u64;
        let mut prev_end = 0u64;
        for (i, entry) in self.chunk_index.iter().enumerate() {
            let i = i as u64;
            if entry.chunk_ordinal != i {
                return Err(FormatError::InvalidManifest(format!(
                    "entry {} carries ordinal {}",
                    i, entry.chunk_ordinal
                )));
            }
            if i == 0 {
                if entry.byte_offset < layout::HEADER_LEN {
                    return Err(FormatError::InvalidManifest(
                        "first chunk overlaps the header".into(),
                    ));
                }
            } else if entry.byte_offset < prev_end {
                return Err(FormatError::InvalidManifest(format!(
                    "chunk {} at offset {} overlaps previous end {}",
                    i, entry.byte_offset, prev_end
                )));
            }
            if entry.byte_length <= layout::CHUNK_HEADER_LEN {
                return Err(FormatError::InvalidManifest(format!(
                    "chunk {} has no payload bytes",
                    i
                )));
            }
            if entry.first_global_index != samples {
                return Err(FormatError::InvalidManifest(format!(
                    "chunk {} first_global_index {} != preceding sample count {}",
                    i, entry.first_global_index, samples
                )));
            }
            if entry.sample_count < 1 || entry.sample_count > self.schema.samples_per_chunk {
                return Err(FormatError::InvalidManifest(format!(
                    "chunk {} sample_count {} outside 1..={}",
                    i, entry.sample_count, self.schema.samples_per_chunk
                )));
            }
            samples += entry.sample_count;
            prev_end = entry.byte_offset + entry.byte_length;
        }
        if samples != self.schema.total_samples {
            return Err(FormatError::InvalidManifest(format!(
                "chunks hold {} samples, schema declares {}",
                samples, self.schema.total_samples
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> u64 {
        self.schema.total_samples
    }

    pub fn total_chunks(&self) -> u64 {
        self.schema.total_chunks
    }

    /// Locates the chunk containing `global_index` by binary search over
    /// `first_global_index`.
    pub fn chunk_for_sample(&self, global_index: u64) -> Result<&ChunkIndexEntry, FormatError> {
        if global_index >= self.schema.total_samples {
            return Err(FormatError::SampleOutOfRange {
                index: global_index,
                total: self.schema.total_samples,
            });
        }
        let pos = self
            .chunk_index
            .partition_point(|e| e.first_global_index <= global_index);
        Ok(&self.chunk_index[pos - 1])
    }
}

/// A decoded sample: its position in the dataset plus its raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub global_index: u64,
    pub payload: Vec<u8>,
}

/// Chunking parameters handed to writers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkingConfig {
    pub encoding: SampleEncoding,
    pub fixed_sample_bytes: u64,
    pub samples_per_chunk: u64,
}

impl ChunkingConfig {
    pub fn fixed(sample_bytes: u64, samples_per_chunk: u64) -> Self {
        Self {
            encoding: SampleEncoding::FixedSize,
            fixed_sample_bytes: sample_bytes,
            samples_per_chunk,
        }
    }

    pub fn variable(samples_per_chunk: u64) -> Self {
        Self {
            encoding: SampleEncoding::LengthPrefixed,
            fixed_sample_bytes: 0,
            samples_per_chunk,
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.samples_per_chunk < 1 {
            return Err(FormatError::InvalidSchema(
                "samples_per_chunk must be >= 1".into(),
            ));
        }
        if self.encoding == SampleEncoding::FixedSize {
            if self.fixed_sample_bytes == 0 {
                return Err(FormatError::InvalidSchema(
                    "fixed_sample_bytes must be >= 1 for fixed_size encoding".into(),
                ));
            }
            let chunk_payload = self
                .fixed_sample_bytes
                .checked_mul(self.samples_per_chunk)
                .unwrap_or(u64::MAX);
            if chunk_payload > u32::MAX as u64 {
                return Err(FormatError::InvalidSchema(format!(
                    "chunk payload {} exceeds the u32 record limit",
                    chunk_payload
                )));
            }
        }
        Ok(())
    }
}

/// Splits a chunk payload into per-sample byte ranges.
pub(crate) fn decode_payload_offsets(
    payload: &[u8],
    encoding: SampleEncoding,
    fixed_sample_bytes: u64,
    ordinal: u64,
) -> Result<Vec<(usize, usize)>, FormatError> {
    match encoding {
        SampleEncoding::FixedSize => {
            let size = fixed_sample_bytes as usize;
            if size == 0 || payload.len() % size != 0 {
                return Err(FormatError::MalformedChunk {
                    ordinal,
                    reason: format!(
                        "payload of {} bytes is not a multiple of sample size {}",
                        payload.len(),
                        size
                    ),
                });
            }
            Ok((0..payload.len() / size)
                .map(|i| (i * size, size))
                .collect())
        }
        SampleEncoding::LengthPrefixed => {
            let mut offsets = Vec::new();
            let mut pos = 0usize;
            while pos < payload.len() {
                if pos + 4 > payload.len() {
                    return Err(FormatError::MalformedChunk {
                        ordinal,
                        reason: format!("dangling length prefix at payload byte {}", pos),
                    });
                }
                let len = u32::from_le_bytes([
                    payload[pos],
                    payload[pos + 1],
                    payload[pos + 2],
                    payload[pos + 3],
                ]) as usize;
                pos += 4;
                if pos + len > payload.len() {
                    return Err(FormatError::MalformedChunk {
                        ordinal,
                        reason: format!("sample of {} bytes overruns the payload", len),
                    });
                }
                offsets.push((pos, len));
                pos += len;
            }
            Ok(offsets)
        }
    }
}
