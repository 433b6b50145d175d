//! `.pemb` embedding files and their optional JSON manifest sidecar.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "PEMB" | u16 version=1 | u16 reserved=0
//! u32 L | u32 d | u32 n_speakers | u32 n_records
//! n_speakers x u32 speaker_id            (ordered pool)
//! per record:
//!   u64 utterance_id | u32 speaker_id | u32 content_id | L*d f32 row-major
//! ```
//!
//! Reading back a written corpus reproduces it bit-exactly; float32 is the
//! canonical storage precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, DataError, UtteranceEmbedding};

pub const PEMB_MAGIC: &[u8; 4] = b"PEMB";
pub const PEMB_VERSION: u16 = 1;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Truncated {
                offset: self.pos as u64,
                needed: (self.pos + n - self.buf.len()) as u64,
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_slice(&mut self, count: usize) -> Result<Vec<f32>, DataError> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serializes a corpus. The corpus is validated first, so non-finite values
/// are rejected before any bytes are written.
pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), DataError> {
    corpus.validate()?;
    let mut out = Vec::with_capacity(
        24 + corpus.speakers.len() * 4
            + corpus.records.len() * (16 + corpus.layer_count() * corpus.dim() * 4),
    );
    out.extend_from_slice(PEMB_MAGIC);
    out.extend_from_slice(&PEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&corpus.l.to_le_bytes());
    out.extend_from_slice(&corpus.d.to_le_bytes());
    out.extend_from_slice(&(corpus.speakers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.records.len() as u32).to_le_bytes());
    for &s in &corpus.speakers {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for r in &corpus.records {
        out.extend_from_slice(&r.utterance_id.to_le_bytes());
        out.extend_from_slice(&r.speaker_id.to_le_bytes());
        out.extend_from_slice(&r.content_id.to_le_bytes());
        for &v in &r.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a `.pemb` file. Errors carry the byte offset where parsing failed.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus, DataError> {
    let buf = fs::read(path)?;
    read_corpus_bytes(&buf)
}

pub fn read_corpus_bytes(buf: &[u8]) -> Result<Corpus, DataError> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4)?;
    if magic != PEMB_MAGIC {
        return Err(DataError::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(PEMB_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version_offset = r.offset();
    let version = r.u16()?;
    if version != PEMB_VERSION {
        return Err(DataError::UnsupportedVersion {
            offset: version_offset,
            version,
        });
    }
    let _reserved = r.u16()?;
    let l = r.u32()?;
    let d = r.u32()?;
    let n_speakers = r.u32()?;
    let n_records = r.u32()?;

    let mut speakers = Vec::with_capacity(n_speakers as usize);
    for _ in 0..n_speakers {
        speakers.push(r.u32()?);
    }

    let per_record = (l as usize) * (d as usize);
    let mut records = Vec::with_capacity(n_records as usize);
    for record in 0..n_records as usize {
        let utterance_id = r.u64()?;
        let speaker_id = r.u32()?;
        let content_id = r.u32()?;
        let matrix_offset = r.offset();
        let matrix = r.f32_slice(per_record)?;
        if let Some(bad) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                record,
                offset: matrix_offset + (bad as u64) * 4,
            });
        }
        records.push(UtteranceEmbedding {
            utterance_id,
            speaker_id,
            content_id,
            matrix,
        });
    }

    Corpus::new(l, d, speakers, records)
}

/// Optional sidecar describing a corpus and its downstream label maps:
/// task name -> utterance id -> class label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub label_maps: BTreeMap<String, BTreeMap<u64, u32>>,
}

/// `foo.pemb` -> `foo.manifest.json`
pub fn manifest_path(corpus_path: impl AsRef<Path>) -> PathBuf {
    corpus_path.as_ref().with_extension("manifest.json")
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), DataError> {
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(path, json)?;
    Ok(())
}

/// Reads the manifest if the sidecar exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Option<Manifest>, DataError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(None);
    }
    let buf = fs::read(path)?;
    Ok(Some(serde_json::from_slice(&buf)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_corpus() -> Corpus {
        let records = vec![
            UtteranceEmbedding {
                utterance_id: 7,
                speaker_id: 3,
                content_id: 1,
                matrix: vec![0.125, -2.5, 3.75, 0.0, 1.0, -1.0],
            },
            UtteranceEmbedding {
                utterance_id: 8,
                speaker_id: 5,
                content_id: 1,
                matrix: vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0],
            },
            UtteranceEmbedding {
                utterance_id: 9,
                speaker_id: 3,
                content_id: 2,
                matrix: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            },
        ];
        Corpus::new(2, 3, vec![3, 5], records).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pemb");
        let corpus = sample_corpus();
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"XXXX");
        bytes.extend_from_slice(&[0u8; 32]);
        match read_corpus_bytes(&bytes) {
            Err(DataError::BadMagic { offset: 0, found, .. }) => assert_eq!(found, "XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pemb");
        write_corpus(&sample_corpus(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9; // version 9
        assert!(matches!(
            read_corpus_bytes(&bytes),
            Err(DataError::UnsupportedVersion { offset: 4, version: 9 })
        ));
    }

    #[test]
    fn overdeclared_record_count_truncates_at_computed_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pemb");
        let corpus = sample_corpus();
        write_corpus(&corpus, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // header: magic(4) version(2) reserved(2) L(4) d(4) n_speakers(4) n_records @ 20
        bytes[20..24].copy_from_slice(&4u32.to_le_bytes());
        let total = bytes.len() as u64;
        match read_corpus_bytes(&bytes) {
            Err(DataError::Truncated { offset, needed }) => {
                // The parser must stop exactly at the end of the real payload.
                assert_eq!(offset, total);
                assert!(needed > 0);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pemb");
        write_corpus(&sample_corpus(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // first record matrix starts at 24 + 2*4 speakers + 16 id fields = 48
        bytes[48..52].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_corpus_bytes(&bytes),
            Err(DataError::NonFinite { record: 0, offset: 48 })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("c.pemb");
        let side = manifest_path(&corpus_path);
        assert_eq!(side, dir.path().join("c.manifest.json"));

        let mut label_map = BTreeMap::new();
        label_map.insert(7u64, 0u32);
        label_map.insert(8u64, 1u32);
        let mut manifest = Manifest {
            name: "sample".into(),
            source: "unit-test".into(),
            label_maps: BTreeMap::new(),
        };
        manifest.label_maps.insert("intent".into(), label_map);

        write_manifest(&manifest, &side).unwrap();
        let back = read_manifest(&side).unwrap().unwrap();
        assert_eq!(manifest, back);
        assert_eq!(read_manifest(dir.path().join("missing.json")).unwrap(), None);
    }
}
