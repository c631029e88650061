//! Read paths: O(footer) open, positional chunk/sample reads, and forward
//! stream iteration.
//!
//! [`DatasetHandle`] opens an indexable file by reading only the header and
//! the footer index, then serves `get_chunk`/`get_sample` through positional
//! reads (`pread`) with no shared cursor, so any number of threads can fetch
//! concurrently without interfering. [`StreamIter`] walks either format
//! front to back and stops at the end marker.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::layout::{
    decode_chunk_header, decode_footer_entry, decode_header, fnv1a64, CHUNK_HEADER_LEN,
    EMPTY_CHECKSUM, FOOTER_ENTRY_LEN, FOOTER_TAIL_LEN, HEADER_LEN, TRAIL_MAGIC,
};
use super::{
    decode_payload_offsets, ChunkIndexEntry, DatasetManifest, FormatError, SampleRecord,
    SchemaDescriptor,
};
use crate::metrics::StageMeter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Stream,
    Indexable,
}

impl std::fmt::Display for FileFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FileFormat::Stream => write!(f, "stream"),
            FileFormat::Indexable => write!(f, "indexable"),
        }
    }
}

/// Determines whether a dataset file is stream- or indexable-format by
/// checking the magics at both ends.
pub fn probe_format(path: &Path) -> Result<FileFormat, FormatError> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut header = [0u8; HEADER_LEN as usize];
    read_exact_at(&file, &mut header, 0)?;
    decode_header(&header)?;
    if len >= HEADER_LEN + FOOTER_TAIL_LEN {
        let mut tail = [0u8; 4];
        read_exact_at(&file, &mut tail, len - 4)?;
        if tail == TRAIL_MAGIC {
            return Ok(FileFormat::Indexable);
        }
    }
    Ok(FileFormat::Stream)
}

/// Tuning knobs for an open handle.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Most-recently-used decoded chunks kept per handle. 0 disables the
    /// cache (the default: shuffled access defeats caching, and benchmarks
    /// should not hide the read path behind one unless asked to).
    pub cache_chunks: usize,
    /// Synthetic delay applied inside every chunk read that reaches the
    /// file, modelling slow storage. Cache hits skip it, like DRAM hits
    /// skip a disk.
    pub read_latency: Duration,
    /// Advise the OS to drop pages after each chunk read so repeated runs
    /// see storage costs rather than page-cache hits.
    pub defeat_os_cache: bool,
}

struct DecodedChunk {
    first_global_index: u64,
    payload: Vec<u8>,
    /// (offset, len) of each sample within `payload`.
    offsets: Vec<(usize, usize)>,
}

/// Tiny MRU map; capacities are small so eviction bookkeeping stays a
/// VecDeque scan.
struct ChunkCache {
    capacity: usize,
    map: HashMap<u64, Arc<DecodedChunk>>,
    order: VecDeque<u64>,
}

impl ChunkCache {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            map: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    fn get(&mut self, ordinal: u64) -> Option<Arc<DecodedChunk>> {
        let hit = self.map.get(&ordinal).cloned();
        if hit.is_some() {
            if let Some(pos) = self.order.iter().position(|&o| o == ordinal) {
                self.order.remove(pos);
                self.order.push_back(ordinal);
            }
        }
        hit
    }

    fn insert(&mut self, ordinal: u64, chunk: Arc<DecodedChunk>) {
        if self.map.contains_key(&ordinal) {
            return;
        }
        while self.map.len() >= self.capacity {
            if let Some(evict) = self.order.pop_front() {
                self.map.remove(&evict);
            } else {
                break;
            }
        }
        self.map.insert(ordinal, chunk);
        self.order.push_back(ordinal);
    }
}

/// An open indexable dataset: manifest plus positional-read capability.
///
/// Shareable across threads; all reads are offset-addressed and never touch
/// a shared cursor.
pub struct DatasetHandle {
    file: File,
    manifest: DatasetManifest,
    options: ReadOptions,
    meter: Arc<StageMeter>,
    open_bytes: u64,
    cache: Option<Mutex<ChunkCache>>,
}

/// Opens an indexable dataset with default options.
pub fn open_indexable(path: &Path) -> Result<DatasetHandle, FormatError> {
    open_indexable_with(path, ReadOptions::default())
}

/// Opens an indexable dataset, reading only the header and the footer.
pub fn open_indexable_with(
    path: &Path,
    options: ReadOptions,
) -> Result<DatasetHandle, FormatError> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut bytes_read = 0u64;

    let mut header = [0u8; HEADER_LEN as usize];
    read_exact_at(&file, &mut header, 0)?;
    bytes_read += HEADER_LEN;
    let schema = decode_header(&header)?;

    if len < HEADER_LEN + CHUNK_HEADER_LEN + FOOTER_TAIL_LEN {
        return Err(FormatError::NoFooterIndex);
    }
    let mut tail = [0u8; FOOTER_TAIL_LEN as usize];
    read_exact_at(&file, &mut tail, len - FOOTER_TAIL_LEN)?;
    bytes_read += FOOTER_TAIL_LEN;
    if tail[8..12] != TRAIL_MAGIC {
        return Err(FormatError::NoFooterIndex);
    }
    let footer_len = u64::from_le_bytes(tail[0..8].try_into().unwrap());
    if footer_len % FOOTER_ENTRY_LEN != 0 {
        return Err(FormatError::TruncatedFooter(format!(
            "footer length {} is not a multiple of the entry size",
            footer_len
        )));
    }
    // header + at least the end marker must precede the footer
    if footer_len > len - HEADER_LEN - CHUNK_HEADER_LEN - FOOTER_TAIL_LEN {
        return Err(FormatError::TruncatedFooter(format!(
            "footer length {} exceeds the file", footer_len
        )));
    }

    let footer_start = len - FOOTER_TAIL_LEN - footer_len;
    let mut footer = vec![0u8; footer_len as usize];
    read_exact_at(&file, &mut footer, footer_start)?;
    bytes_read += footer_len;

    let mut chunk_index = Vec::with_capacity((footer_len / FOOTER_ENTRY_LEN) as usize);
    for (i, raw) in footer.chunks_exact(FOOTER_ENTRY_LEN as usize).enumerate() {
        let (byte_offset, byte_length, sample_count, first_global_index, checksum) =
            decode_footer_entry(raw);
        chunk_index.push(ChunkIndexEntry {
            chunk_ordinal: i as u64,
            byte_offset,
            byte_length,
            sample_count,
            first_global_index,
            checksum,
        });
    }

    let manifest = DatasetManifest {
        schema,
        chunk_index,
    };
    manifest.validate()?;

    // The chunk region, end marker, and footer must tile the file exactly.
    let chunk_region_end = manifest
        .chunk_index
        .last()
        .map(|e| e.byte_offset + e.byte_length)
        .unwrap_or(HEADER_LEN);
    if chunk_region_end + CHUNK_HEADER_LEN != footer_start {
        return Err(FormatError::TruncatedFooter(format!(
            "chunk region ends at {} but the footer starts at {}",
            chunk_region_end + CHUNK_HEADER_LEN,
            footer_start
        )));
    }

    let cache = (options.cache_chunks > 0).then(|| Mutex::new(ChunkCache::new(options.cache_chunks)));
    Ok(DatasetHandle {
        file,
        manifest,
        options,
        meter: Arc::new(StageMeter::default()),
        open_bytes: bytes_read,
        cache,
    })
}

impl DatasetHandle {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn schema(&self) -> &SchemaDescriptor {
        &self.manifest.schema
    }

    pub fn total_samples(&self) -> u64 {
        self.manifest.schema.total_samples
    }

    pub fn total_chunks(&self) -> u64 {
        self.manifest.schema.total_chunks
    }

    /// Bytes read from the file while opening: header + footer, never
    /// payload.
    pub fn open_bytes_read(&self) -> u64 {
        self.open_bytes
    }

    pub fn meter(&self) -> &Arc<StageMeter> {
        &self.meter
    }

    /// Reads, verifies, and decodes one whole chunk.
    pub fn get_chunk(&self, chunk_ordinal: u64) -> Result<Vec<SampleRecord>, FormatError> {
        let total = self.manifest.schema.total_chunks;
        let entry = self
            .manifest
            .chunk_index
            .get(chunk_ordinal as usize)
            .ok_or(FormatError::ChunkOutOfRange {
                ordinal: chunk_ordinal,
                total,
            })?;
        let chunk = self.load_chunk(entry)?;
        Ok(chunk
            .offsets
            .iter()
            .enumerate()
            .map(|(i, &(off, len))| SampleRecord {
                global_index: chunk.first_global_index + i as u64,
                payload: chunk.payload[off..off + len].to_vec(),
            })
            .collect())
    }

    /// Fetches a single sample by global index: binary search for the
    /// containing chunk, read and decode that chunk only.
    pub fn get_sample(&self, global_index: u64) -> Result<SampleRecord, FormatError> {
        let lookup_start = Instant::now();
        let entry = self.manifest.chunk_for_sample(global_index)?;
        self.meter.add_index_lookup(lookup_start.elapsed());

        let chunk = self.load_chunk(entry)?;
        let slot = (global_index - chunk.first_global_index) as usize;
        let (off, len) = chunk.offsets[slot];
        Ok(SampleRecord {
            global_index,
            payload: chunk.payload[off..off + len].to_vec(),
        })
    }

    fn load_chunk(&self, entry: &ChunkIndexEntry) -> Result<Arc<DecodedChunk>, FormatError> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lock().unwrap().get(entry.chunk_ordinal) {
                return Ok(hit);
            }
        }
        let chunk = Arc::new(self.read_and_decode(entry)?);
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .unwrap()
                .insert(entry.chunk_ordinal, Arc::clone(&chunk));
        }
        Ok(chunk)
    }

    fn read_and_decode(&self, entry: &ChunkIndexEntry) -> Result<DecodedChunk, FormatError> {
        let read_start = Instant::now();
        if !self.options.read_latency.is_zero() {
            std::thread::sleep(self.options.read_latency);
        }
        let mut record = vec![0u8; entry.byte_length as usize];
        read_exact_at(&self.file, &mut record, entry.byte_offset).map_err(|e| match e {
            FormatError::Io(err) if err.kind() == std::io::ErrorKind::UnexpectedEof => {
                FormatError::TruncatedChunk {
                    offset: entry.byte_offset,
                }
            }
            other => other,
        })?;
        if self.options.defeat_os_cache {
            drop_page_cache(&self.file, entry.byte_offset, entry.byte_length);
        }
        self.meter.add_read(read_start.elapsed());
        self.meter.add_bytes_read(entry.byte_length);

        let decode_start = Instant::now();
        let header: [u8; CHUNK_HEADER_LEN as usize] =
            record[..CHUNK_HEADER_LEN as usize].try_into().unwrap();
        let (payload_len, stored_checksum) = decode_chunk_header(&header);
        if payload_len as u64 != entry.payload_len() || stored_checksum != entry.checksum {
            return Err(FormatError::ChecksumMismatch {
                ordinal: entry.chunk_ordinal,
                expected: entry.checksum,
                actual: stored_checksum,
            });
        }
        let payload = record.split_off(CHUNK_HEADER_LEN as usize);
        let computed = fnv1a64(&payload);
        if computed != entry.checksum {
            return Err(FormatError::ChecksumMismatch {
                ordinal: entry.chunk_ordinal,
                expected: entry.checksum,
                actual: computed,
            });
        }
        let offsets = decode_payload_offsets(
            &payload,
            self.manifest.schema.sample_encoding,
            self.manifest.schema.fixed_sample_bytes,
            entry.chunk_ordinal,
        )?;
        if offsets.len() as u64 != entry.sample_count {
            return Err(FormatError::MalformedChunk {
                ordinal: entry.chunk_ordinal,
                reason: format!(
                    "decoded {} samples, index declares {}",
                    offsets.len(),
                    entry.sample_count
                ),
            });
        }
        self.meter.add_decode(decode_start.elapsed());
        Ok(DecodedChunk {
            first_global_index: entry.first_global_index,
            payload,
            offsets,
        })
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> Result<(), FormatError> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)?;
    Ok(())
}

#[cfg(target_os = "linux")]
fn drop_page_cache(file: &File, offset: u64, len: u64) {
    use std::os::unix::io::AsRawFd;
    // Advisory only; failure just means the next read may hit the cache.
    unsafe {
        libc::posix_fadvise(
            file.as_raw_fd(),
            offset as libc::off_t,
            len as libc::off_t,
            libc::POSIX_FADV_DONTNEED,
        );
    }
}

#[cfg(not(target_os = "linux"))]
fn drop_page_cache(_file: &File, _offset: u64, _len: u64) {}

/// A verified raw chunk as stored on disk, before sample decoding.
#[derive(Debug, Clone)]
pub struct RawChunk {
    pub ordinal: u64,
    pub payload: Vec<u8>,
    pub checksum: u64,
    pub sample_count: u64,
    /// File offset of the chunk record.
    pub byte_offset: u64,
}

/// Sequentially reads chunk records until the end marker, verifying each
/// checksum. Works on both formats (an indexable file's footer is never
/// reached because the end marker precedes it).
pub struct RawChunkIter {
    reader: BufReader<File>,
    schema: SchemaDescriptor,
    offset: u64,
    ordinal: u64,
    finished: bool,
}

impl RawChunkIter {
    pub fn open(path: &Path) -> Result<Self, FormatError> {
        let file = File::open(path)?;
        let mut reader = BufReader::with_capacity(256 * 1024, file);
        let mut header = [0u8; HEADER_LEN as usize];
        reader.read_exact(&mut header).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                FormatError::BadMagic
            } else {
                FormatError::Io(e)
            }
        })?;
        let schema = decode_header(&header)?;
        Ok(Self {
            reader,
            schema,
            offset: HEADER_LEN,
            ordinal: 0,
            finished: false,
        })
    }

    pub fn schema(&self) -> &SchemaDescriptor {
        &self.schema
    }

    fn read_next(&mut self) -> Result<Option<RawChunk>, FormatError> {
        if self.finished {
            return Ok(None);
        }
        let record_offset = self.offset;
        let mut header = [0u8; CHUNK_HEADER_LEN as usize];
        match read_fully(&mut self.reader, &mut header)? {
            ReadOutcome::Complete => {}
            ReadOutcome::Empty => {
                // EOF at a record boundary without an end marker: the
                // writer never finished this file.
                self.finished = true;
                return Err(FormatError::MissingEndMarker);
            }
            ReadOutcome::Partial => {
                self.finished = true;
                return Err(FormatError::TruncatedChunk {
                    offset: record_offset,
                });
            }
        }
        self.offset += CHUNK_HEADER_LEN;
        let (payload_len, checksum) = decode_chunk_header(&header);
        if payload_len == 0 {
            self.finished = true;
            if checksum != EMPTY_CHECKSUM {
                return Err(FormatError::MalformedChunk {
                    ordinal: self.ordinal,
                    reason: "end marker carries a bogus checksum".into(),
                });
            }
            return Ok(None);
        }

        let mut payload = vec![0u8; payload_len as usize];
        match read_fully(&mut self.reader, &mut payload)? {
            ReadOutcome::Complete => {}
            _ => {
                self.finished = true;
                return Err(FormatError::TruncatedChunk {
                    offset: record_offset,
                });
            }
        }
        self.offset += payload_len as u64;

        let computed = fnv1a64(&payload);
        if computed != checksum {
            self.finished = true;
            return Err(FormatError::ChecksumMismatch {
                ordinal: self.ordinal,
                expected: checksum,
                actual: computed,
            });
        }
        let offsets = decode_payload_offsets(
            &payload,
            self.schema.sample_encoding,
            self.schema.fixed_sample_bytes,
            self.ordinal,
        )?;
        let sample_count = offsets.len() as u64;
        if sample_count == 0 || sample_count > self.schema.samples_per_chunk {
            self.finished = true;
            return Err(FormatError::MalformedChunk {
                ordinal: self.ordinal,
                reason: format!(
                    "chunk holds {} samples, schema allows 1..={}",
                    sample_count, self.schema.samples_per_chunk
                ),
            });
        }
        let chunk = RawChunk {
            ordinal: self.ordinal,
            payload,
            checksum,
            sample_count,
            byte_offset: record_offset,
        };
        self.ordinal += 1;
        Ok(Some(chunk))
    }
}

impl Iterator for RawChunkIter {
    type Item = Result<RawChunk, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_next().transpose()
    }
}

enum ReadOutcome {
    Complete,
    Partial,
    Empty,
}

fn read_fully<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<ReadOutcome, FormatError> {
    let mut filled = 0usize;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Ok(if filled == 0 {
                    ReadOutcome::Empty
                } else {
                    ReadOutcome::Partial
                });
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FormatError::Io(e)),
        }
    }
    Ok(ReadOutcome::Complete)
}

/// Ordered iterator over every sample of a stream or indexable file.
pub struct StreamIter {
    chunks: RawChunkIter,
    pending: VecDeque<SampleRecord>,
    next_global_index: u64,
    poisoned: bool,
}

/// Iterates samples in global-index order, yielding each exactly once.
pub fn iterate_stream(path: &Path) -> Result<StreamIter, FormatError> {
    Ok(StreamIter {
        chunks: RawChunkIter::open(path)?,
        pending: VecDeque::new(),
        next_global_index: 0,
        poisoned: false,
    })
}

impl StreamIter {
    pub fn schema(&self) -> &SchemaDescriptor {
        self.chunks.schema()
    }
}

impl Iterator for StreamIter {
    type Item = Result<SampleRecord, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.poisoned {
            return None;
        }
        if let Some(record) = self.pending.pop_front() {
            return Some(Ok(record));
        }
        match self.chunks.next() {
            None => None,
            Some(Err(e)) => {
                self.poisoned = true;
                Some(Err(e))
            }
            Some(Ok(chunk)) => {
                let offsets = match decode_payload_offsets(
                    &chunk.payload,
                    self.chunks.schema.sample_encoding,
                    self.chunks.schema.fixed_sample_bytes,
                    chunk.ordinal,
                ) {
                    Ok(o) => o,
                    Err(e) => {
                        self.poisoned = true;
                        return Some(Err(e));
                    }
                };
                for (off, len) in offsets {
                    let record = SampleRecord {
                        global_index: self.next_global_index,
                        payload: chunk.payload[off..off + len].to_vec(),
                    };
                    self.next_global_index += 1;
                    self.pending.push_back(record);
                }
                self.pending.pop_front().map(Ok)
            }
        }
    }
}
