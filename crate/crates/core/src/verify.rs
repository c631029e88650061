//! Dataset integrity checks behind the CLI `verify` subcommand.

use std::path::Path;

use crate::format::{
    iterate_stream, open_indexable, probe_format, FileFormat, FormatError, RawChunkIter,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub format: FileFormat,
    pub chunks: u64,
    pub samples: u64,
    /// Set when the footer index was audited against the chunk stream.
    pub manifest_audited: bool,
}

/// Full-file check: every chunk checksum, schema totals, and (for
/// indexable files) the footer index against the actual chunk stream.
pub fn verify_dataset(path: &Path) -> Result<VerifyReport, FormatError> {
    let format = probe_format(path)?;
    let manifest = match format {
        FileFormat::Indexable => Some(open_indexable(path)?.manifest().clone()),
        FileFormat::Stream => None,
    };

    let mut chunks = RawChunkIter::open(path)?;
    let schema = *chunks.schema();
    let mut chunk_count = 0u64;
    let mut sample_count = 0u64;
    while let Some(chunk) = chunks.next().transpose()? {
        if let Some(manifest) = &manifest {
            let entry = &manifest.chunk_index[chunk.ordinal as usize];
            if entry.byte_offset != chunk.byte_offset
                || entry.checksum != chunk.checksum
                || entry.sample_count != chunk.sample_count
            {
                return Err(FormatError::InvalidManifest(format!(
                    "footer entry {} disagrees with the chunk stream",
                    chunk.ordinal
                )));
            }
        }
        chunk_count += 1;
        sample_count += chunk.sample_count;
    }

    if sample_count != schema.total_samples || chunk_count != schema.total_chunks {
        return Err(FormatError::InvalidSchema(format!(
            "header declares {} samples in {} chunks but the file holds {} in {}",
            schema.total_samples, schema.total_chunks, sample_count, chunk_count
        )));
    }

    Ok(VerifyReport {
        format,
        chunks: chunk_count,
        samples: sample_count,
        manifest_audited: manifest.is_some(),
    })
}

/// Compares two dataset files sample by sample. Returns the first global
/// index whose payloads differ (or the first missing one), `None` when the
/// files hold identical sample sequences.
pub fn compare_sample_streams(a: &Path, b: &Path) -> Result<Option<u64>, FormatError> {
    let mut left = iterate_stream(a)?;
    let mut right = iterate_stream(b)?;
    let mut index = 0u64;
    loop {
        match (left.next().transpose()?, right.next().transpose()?) {
            (None, None) => return Ok(None),
            (Some(l), Some(r)) if l.payload == r.payload => index += 1,
            _ => return Ok(Some(index)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{write_indexable_dataset, write_stream_dataset, ChunkingConfig};
    use std::io::{Seek, SeekFrom, Write};

    fn payloads(n: u64) -> Vec<Vec<u8>> {
        (0..n).map(|i| vec![i as u8; 8]).collect()
    }

    #[test]
    fn fresh_files_verify_clean() {
        let dir = tempfile::tempdir().unwrap();
        let stream = dir.path().join("s");
        let indexed = dir.path().join("i");
        write_stream_dataset(&stream, payloads(20), ChunkingConfig::fixed(8, 6)).unwrap();
        write_indexable_dataset(&indexed, payloads(20), ChunkingConfig::fixed(8, 6)).unwrap();

        let report = verify_dataset(&stream).unwrap();
        assert_eq!(report.format, FileFormat::Stream);
        assert_eq!(report.samples, 20);
        assert!(!report.manifest_audited);

        let report = verify_dataset(&indexed).unwrap();
        assert_eq!(report.format, FileFormat::Indexable);
        assert_eq!(report.chunks, 4);
        assert!(report.manifest_audited);
    }

    #[test]
    fn corruption_is_detected_with_chunk_ordinal() {
        let dir = tempfile::tempdir().unwrap();
        let indexed = dir.path().join("i");
        write_indexable_dataset(&indexed, payloads(20), ChunkingConfig::fixed(8, 6)).unwrap();
        let mut file = std::fs::OpenOptions::new().write(true).open(&indexed).unwrap();
        // chunk 0 payload byte
        file.seek(SeekFrom::Start(39 + 12 + 1)).unwrap();
        file.write_all(&[0xaa]).unwrap();
        drop(file);
        assert!(matches!(
            verify_dataset(&indexed),
            Err(FormatError::ChecksumMismatch { ordinal: 0, .. })
        ));
    }

    #[test]
    fn stream_and_indexable_siblings_compare_equal() {
        let dir = tempfile::tempdir().unwrap();
        let stream = dir.path().join("s");
        let indexed = dir.path().join("i");
        write_stream_dataset(&stream, payloads(20), ChunkingConfig::fixed(8, 6)).unwrap();
        write_indexable_dataset(&indexed, payloads(20), ChunkingConfig::fixed(8, 6)).unwrap();
        assert_eq!(compare_sample_streams(&stream, &indexed).unwrap(), None);

        let other = dir.path().join("o");
        let mut different = payloads(20);
        different[7][0] ^= 1;
        write_stream_dataset(&other, different, ChunkingConfig::fixed(8, 6)).unwrap();
        assert_eq!(compare_sample_streams(&stream, &other).unwrap(), Some(7));
    }
}
