//! Single-owner writers for the stream and indexable formats.
//!
//! Both formats are produced by the same incremental writer: samples are
//! buffered into one chunk at a time, so memory stays bounded by a single
//! chunk regardless of dataset size. The header is written up front with
//! zeroed totals and patched on `finish`, which also appends the end
//! marker and, for the indexable format, the footer index.
//!
//! A file that is missing its end marker was aborted mid-write; readers
//! report it as [`FormatError::MissingEndMarker`].

use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use super::layout::{
    encode_chunk_header, encode_footer_entry, encode_header, fnv1a64, EMPTY_CHECKSUM,
    FORMAT_VERSION, HEADER_LEN, TRAIL_MAGIC,
};
use super::{
    ChunkIndexEntry, ChunkingConfig, DatasetManifest, FormatError, SampleEncoding,
    SchemaDescriptor,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteStats {
    pub samples_written: u64,
    pub chunks_written: u64,
    /// Final file length in bytes.
    pub bytes_written: u64,
}

/// Incremental writer over any seekable sink.
pub struct DatasetWriter<W: Write + Seek> {
    sink: W,
    chunking: ChunkingConfig,
    indexed: bool,
    chunk_payload: Vec<u8>,
    chunk_samples: u64,
    next_chunk_offset: u64,
    samples_written: u64,
    chunk_index: Vec<ChunkIndexEntry>,
}

impl<W: Write + Seek> DatasetWriter<W> {
    pub fn stream(sink: W, chunking: ChunkingConfig) -> Result<Self, FormatError> {
        Self::new(sink, chunking, false)
    }

    pub fn indexable(sink: W, chunking: ChunkingConfig) -> Result<Self, FormatError> {
        Self::new(sink, chunking, true)
    }

    fn new(mut sink: W, chunking: ChunkingConfig, indexed: bool) -> Result<Self, FormatError> {
        chunking.validate()?;
        // Totals are unknown until finish(); write zeros and patch later.
        let schema = SchemaDescriptor {
            format_version: FORMAT_VERSION,
            sample_encoding: chunking.encoding,
            fixed_sample_bytes: chunking.fixed_sample_bytes,
            samples_per_chunk: chunking.samples_per_chunk,
            total_samples: 0,
            total_chunks: 0,
        };
        sink.write_all(&encode_header(&schema))?;
        Ok(Self {
            sink,
            chunking,
            indexed,
            chunk_payload: Vec::new(),
            chunk_samples: 0,
            next_chunk_offset: HEADER_LEN,
            samples_written: 0,
            chunk_index: Vec::new(),
        })
    }

    pub fn push(&mut self, payload: &[u8]) -> Result<(), FormatError> {
        match self.chunking.encoding {
            SampleEncoding::FixedSize => {
                if payload.len() as u64 != self.chunking.fixed_sample_bytes {
                    return Err(FormatError::InvalidSchema(format!(
                        "sample {} has {} bytes, fixed_size encoding requires {}",
                        self.samples_written,
                        payload.len(),
                        self.chunking.fixed_sample_bytes
                    )));
                }
                self.chunk_payload.extend_from_slice(payload);
            }
            SampleEncoding::LengthPrefixed => {
                if payload.len() as u64 > u32::MAX as u64 {
                    return Err(FormatError::InvalidSchema(format!(
                        "sample {} exceeds the u32 length-prefix limit",
                        self.samples_written
                    )));
                }
                self.chunk_payload
                    .extend_from_slice(&(payload.len() as u32).to_le_bytes());
                self.chunk_payload.extend_from_slice(payload);
            }
        }
        self.chunk_samples += 1;
        self.samples_written += 1;
        if self.chunk_samples == self.chunking.samples_per_chunk {
            self.flush_chunk()?;
        }
        Ok(())
    }

    /// Appends a pre-encoded chunk verbatim. Used by the converter so
    /// payload bytes and checksums carry over untouched.
    pub fn push_raw_chunk(
        &mut self,
        payload: &[u8],
        checksum: u64,
        sample_count: u64,
    ) -> Result<(), FormatError> {
        if self.chunk_samples != 0 {
            return Err(FormatError::InvalidSchema(
                "raw chunks cannot be mixed into a partially buffered chunk".into(),
            ));
        }
        if sample_count < 1 || sample_count > self.chunking.samples_per_chunk {
            return Err(FormatError::InvalidSchema(format!(
                "raw chunk sample_count {} outside 1..={}",
                sample_count, self.chunking.samples_per_chunk
            )));
        }
        let first_global_index = self.samples_written;
        self.write_chunk_record(payload, checksum, sample_count, first_global_index)?;
        self.samples_written += sample_count;
        Ok(())
    }

    fn flush_chunk(&mut self) -> Result<(), FormatError> {
        if self.chunk_samples == 0 {
            return Ok(());
        }
        if self.chunk_payload.len() as u64 > u32::MAX as u64 {
            return Err(FormatError::InvalidSchema(
                "chunk payload exceeds the u32 record limit".into(),
            ));
        }
        let checksum = fnv1a64(&self.chunk_payload);
        let payload = std::mem::take(&mut self.chunk_payload);
        let samples = self.chunk_samples;
        self.chunk_samples = 0;
        // samples_written already counts the buffered samples
        let first_global_index = self.samples_written - samples;
        self.write_chunk_record(&payload, checksum, samples, first_global_index)
    }

    fn write_chunk_record(
        &mut self,
        payload: &[u8],
        checksum: u64,
        sample_count: u64,
        first_global_index: u64,
    ) -> Result<(), FormatError> {
        if payload.is_empty() {
            return Err(FormatError::InvalidSchema(
                "chunk payload must be non-empty".into(),
            ));
        }
        self.sink
            .write_all(&encode_chunk_header(payload.len() as u32, checksum))?;
        self.sink.write_all(payload)?;
        let byte_length = 12 + payload.len() as u64;
        self.chunk_index.push(ChunkIndexEntry {
            chunk_ordinal: self.chunk_index.len() as u64,
            byte_offset: self.next_chunk_offset,
            byte_length,
            sample_count,
            first_global_index,
            checksum,
        });
        self.next_chunk_offset += byte_length;
        Ok(())
    }

    /// Flushes the trailing partial chunk, writes the end marker (and the
    /// footer for indexable files), and patches the header totals.
    pub fn finish(mut self) -> Result<(DatasetManifest, WriteStats), FormatError> {
        self.flush_chunk()?;
        // End marker: a zero-length chunk record.
        self.sink.write_all(&encode_chunk_header(0, EMPTY_CHECKSUM))?;

        let schema = SchemaDescriptor {
            format_version: FORMAT_VERSION,
            sample_encoding: self.chunking.encoding,
            fixed_sample_bytes: self.chunking.fixed_sample_bytes,
            samples_per_chunk: self.chunking.samples_per_chunk,
            total_samples: self.samples_written,
            total_chunks: self.chunk_index.len() as u64,
        };

        if self.indexed {
            let mut footer = Vec::with_capacity(self.chunk_index.len() * 40);
            for entry in &self.chunk_index {
                footer.extend_from_slice(&encode_footer_entry(
                    entry.byte_offset,
                    entry.byte_length,
                    entry.sample_count,
                    entry.first_global_index,
                    entry.checksum,
                ));
            }
            self.sink.write_all(&footer)?;
            self.sink.write_all(&(footer.len() as u64).to_le_bytes())?;
            self.sink.write_all(&TRAIL_MAGIC)?;
        }

        let end = self.sink.stream_position()?;
        self.sink.seek(SeekFrom::Start(0))?;
        self.sink.write_all(&encode_header(&schema))?;
        self.sink.seek(SeekFrom::Start(end))?;
        self.sink.flush()?;

        let manifest = DatasetManifest {
            schema,
            chunk_index: self.chunk_index,
        };
        manifest.validate()?;
        let stats = WriteStats {
            samples_written: self.samples_written,
            chunks_written: manifest.chunk_index.len() as u64,
            bytes_written: end,
        };
        Ok((manifest, stats))
    }
}

/// Writes `samples` to `path` in the stream format.
pub fn write_stream_dataset<I, P>(
    path: &Path,
    samples: I,
    chunking: ChunkingConfig,
) -> Result<WriteStats, FormatError>
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let sink = BufWriter::new(File::create(path)?);
    let mut writer = DatasetWriter::stream(sink, chunking)?;
    for sample in samples {
        writer.push(sample.as_ref())?;
    }
    let (_, stats) = writer.finish()?;
    Ok(stats)
}

/// Writes `samples` to `path` in the indexable format and returns the
/// manifest describing the file.
pub fn write_indexable_dataset<I, P>(
    path: &Path,
    samples: I,
    chunking: ChunkingConfig,
) -> Result<(DatasetManifest, WriteStats), FormatError>
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let sink = BufWriter::new(File::create(path)?);
    let mut writer = DatasetWriter::indexable(sink, chunking)?;
    for sample in samples {
        writer.push(sample.as_ref())?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn payloads(n: usize, bytes: usize) -> Vec<Vec<u8>> {
        (0..n).map(|i| vec![i as u8; bytes]).collect()
    }

    #[test]
    fn chunk_sizes_follow_ceiling_arithmetic() {
        let mut writer =
            DatasetWriter::indexable(Cursor::new(Vec::new()), ChunkingConfig::fixed(3, 4)).unwrap();
        for p in payloads(10, 3) {
            writer.push(&p).unwrap();
        }
        let (manifest, stats) = writer.finish().unwrap();
        assert_eq!(stats.chunks_written, 3);
        assert_eq!(stats.samples_written, 10);
        let counts: Vec<u64> = manifest.chunk_index.iter().map(|e| e.sample_count).collect();
        assert_eq!(counts, vec![4, 4, 2]);
        let firsts: Vec<u64> = manifest
            .chunk_index
            .iter()
            .map(|e| e.first_global_index)
            .collect();
        assert_eq!(firsts, vec![0, 4, 8]);
    }

    #[test]
    fn empty_dataset_writes_header_and_marker_only() {
        let mut sink = Cursor::new(Vec::new());
        let writer = DatasetWriter::stream(&mut sink, ChunkingConfig::fixed(8, 4)).unwrap();
        let (manifest, stats) = writer.finish().unwrap();
        assert_eq!(stats.chunks_written, 0);
        assert_eq!(manifest.schema.total_chunks, 0);
        // header + end marker, nothing else
        assert_eq!(sink.get_ref().len() as u64, HEADER_LEN + 12);
    }

    #[test]
    fn single_sample_chunk_starts_at_header_end() {
        let mut writer =
            DatasetWriter::indexable(Cursor::new(Vec::new()), ChunkingConfig::fixed(5, 4)).unwrap();
        writer.push(&[1, 2, 3, 4, 5]).unwrap();
        let (manifest, _) = writer.finish().unwrap();
        assert_eq!(manifest.chunk_index.len(), 1);
        assert_eq!(manifest.chunk_index[0].byte_offset, HEADER_LEN);
    }

    #[test]
    fn fixed_encoding_rejects_wrong_size() {
        let mut writer =
            DatasetWriter::stream(Cursor::new(Vec::new()), ChunkingConfig::fixed(4, 2)).unwrap();
        assert!(writer.push(&[1, 2, 3]).is_err());
    }

    #[test]
    fn chunk_payloads_identical_between_formats() {
        let samples = payloads(10, 16);
        let chunking = ChunkingConfig::fixed(16, 4);
        let mut stream_sink = Cursor::new(Vec::new());
        let mut indexed_sink = Cursor::new(Vec::new());
        let mut sw = DatasetWriter::stream(&mut stream_sink, chunking).unwrap();
        let mut iw = DatasetWriter::indexable(&mut indexed_sink, chunking).unwrap();
        for p in &samples {
            sw.push(p).unwrap();
            iw.push(p).unwrap();
        }
        let (sm, s_stats) = sw.finish().unwrap();
        let (im, _) = iw.finish().unwrap();
        // Chunk regions are byte-identical; the indexable file differs only
        // by its footer.
        let chunk_region = s_stats.bytes_written as usize;
        assert_eq!(
            &stream_sink.get_ref()[..chunk_region],
            &indexed_sink.get_ref()[..chunk_region]
        );
        assert_eq!(sm.chunk_index, im.chunk_index);
    }
}
