//! Stream-to-indexable conversion with bounded working memory.
//!
//! The converter pulls one chunk at a time from the source, verifies its
//! checksum, and appends the record verbatim to the destination, so payload
//! bytes and checksums carry over untouched. Only a single chunk buffer is
//! alive at any instant; the chunk index grows in memory at 48 bytes per
//! chunk. Peak buffer usage is measured, not assumed, and reported in
//! [`ConversionStats`].

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::reader::RawChunkIter;
use super::writer::DatasetWriter;
use super::{ChunkingConfig, DatasetManifest, FormatError};

const IO_BUFFER_BYTES: u64 = 2 * 256 * 1024; // BufReader + BufWriter capacity

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConversionStats {
    pub chunks: u64,
    pub samples: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    /// Largest total of chunk buffers held at any instant.
    pub peak_buffer_bytes: u64,
    /// In-memory size of the chunk index built during conversion.
    pub index_bytes: u64,
    /// Fixed reader/writer buffer capacity, constant in the dataset size.
    pub fixed_io_buffer_bytes: u64,
}

/// Tracks bytes of chunk buffers currently held, and the high-water mark.
#[derive(Debug, Default)]
struct BufferMeter {
    current: u64,
    peak: u64,
}

impl BufferMeter {
    fn acquire(&mut self, bytes: u64) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    fn release(&mut self, bytes: u64) {
        debug_assert!(self.current >= bytes);
        self.current -= bytes;
    }
}

/// Rewrites a stream-format file as an indexable file.
///
/// Sample `i` of the destination is byte-identical to sample `i` of the
/// source. A corrupt source chunk aborts the conversion with the failing
/// chunk ordinal.
pub fn convert_stream_to_indexable(
    source: &Path,
    destination: &Path,
) -> Result<(DatasetManifest, ConversionStats), FormatError> {
    let mut chunks = RawChunkIter::open(source)?;
    let schema = *chunks.schema();
    let chunking = ChunkingConfig {
        encoding: schema.sample_encoding,
        fixed_sample_bytes: schema.fixed_sample_bytes,
        samples_per_chunk: schema.samples_per_chunk,
    };

    let sink = BufWriter::with_capacity(256 * 1024, File::create(destination)?);
    let mut writer = DatasetWriter::indexable(sink, chunking)?;
    let mut meter = BufferMeter::default();
    let mut bytes_in = 0u64;

    while let Some(chunk) = chunks.next().transpose()? {
        let held = chunk.payload.len() as u64;
        meter.acquire(held);
        bytes_in += 12 + held;
        writer.push_raw_chunk(&chunk.payload, chunk.checksum, chunk.sample_count)?;
        meter.release(held);
        drop(chunk);
    }

    let (manifest, write_stats) = writer.finish()?;

    // The source header already carried totals; a finished file that
    // disagrees with its own chunk stream is corrupt.
    if schema.total_samples != manifest.schema.total_samples
        || schema.total_chunks != manifest.schema.total_chunks
    {
        return Err(FormatError::InvalidSchema(format!(
            "source header declares {} samples in {} chunks but the stream held {} in {}",
            schema.total_samples,
            schema.total_chunks,
            manifest.schema.total_samples,
            manifest.schema.total_chunks
        )));
    }

    let stats = ConversionStats {
        chunks: write_stats.chunks_written,
        samples: write_stats.samples_written,
        bytes_in,
        bytes_out: write_stats.bytes_written,
        peak_buffer_bytes: meter.peak,
        index_bytes: manifest.chunk_index.len() as u64
            * std::mem::size_of::<super::ChunkIndexEntry>() as u64,
        fixed_io_buffer_bytes: IO_BUFFER_BYTES,
    };
    Ok((manifest, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{
        iterate_stream, open_indexable, write_stream_dataset, ChunkingConfig, FormatError,
    };
    use std::io::{Seek, SeekFrom, Write};

    #[test]
    fn empty_stream_converts_to_empty_indexable() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.stream");
        let dst = dir.path().join("dst.indexed");
        write_stream_dataset(&src, std::iter::empty::<Vec<u8>>(), ChunkingConfig::fixed(8, 4))
            .unwrap();
        let (manifest, stats) = convert_stream_to_indexable(&src, &dst).unwrap();
        assert_eq!(stats.chunks, 0);
        assert_eq!(manifest.schema.total_samples, 0);
        assert_eq!(open_indexable(&dst).unwrap().total_chunks(), 0);
    }

    #[test]
    fn three_chunk_conversion_preserves_samples_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.stream");
        let dst = dir.path().join("dst.indexed");
        let samples: Vec<Vec<u8>> = (0..10u8).map(|i| vec![i; 6]).collect();
        write_stream_dataset(&src, samples.clone(), ChunkingConfig::fixed(6, 4)).unwrap();
        let (manifest, stats) = convert_stream_to_indexable(&src, &dst).unwrap();
        assert_eq!(stats.chunks, 3);
        assert_eq!(stats.samples, 10);
        let offsets: Vec<u64> = manifest.chunk_index.iter().map(|e| e.byte_offset).collect();
        assert!(offsets.windows(2).all(|w| w[0] < w[1]));

        let converted: Vec<Vec<u8>> = iterate_stream(&dst)
            .unwrap()
            .map(|r| r.unwrap().payload)
            .collect();
        assert_eq!(converted, samples);
    }

    #[test]
    fn corrupt_source_chunk_names_the_ordinal() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.stream");
        let dst = dir.path().join("dst.indexed");
        let samples: Vec<Vec<u8>> = (0..10u8).map(|i| vec![i; 6]).collect();
        write_stream_dataset(&src, samples, ChunkingConfig::fixed(6, 4)).unwrap();
        // Flip a byte inside chunk 1's payload.
        let chunk0_len = 12 + 24;
        let mut file = std::fs::OpenOptions::new().write(true).open(&src).unwrap();
        file.seek(SeekFrom::Start(39 + chunk0_len as u64 + 12 + 2)).unwrap();
        file.write_all(&[0xee]).unwrap();
        drop(file);
        let err = convert_stream_to_indexable(&src, &dst).unwrap_err();
        assert!(matches!(err, FormatError::ChecksumMismatch { ordinal: 1, .. }));
    }

    #[test]
    fn peak_buffer_is_bounded_by_one_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.stream");
        let dst = dir.path().join("dst.indexed");
        let samples: Vec<Vec<u8>> = (0..64u8).map(|i| vec![i; 128]).collect();
        write_stream_dataset(&src, samples, ChunkingConfig::fixed(128, 8)).unwrap();
        let (_, stats) = convert_stream_to_indexable(&src, &dst).unwrap();
        assert_eq!(stats.peak_buffer_bytes, 8 * 128);
    }
}
