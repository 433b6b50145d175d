//! Embedding corpus types.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: String,
        found: String,
    },
    #[error("unsupported format version {version} at byte {offset}")]
    UnsupportedVersion { offset: u64, version: u16 },
    #[error("truncated file at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("non-finite value in record {record} at byte {offset}")]
    NonFinite { record: usize, offset: u64 },
    #[error("record {record}: speaker {speaker} is not in the corpus speaker pool")]
    UnknownSpeaker { record: usize, speaker: u32 },
    #[error("record {record}: matrix has {got} values, corpus dimensions {l}x{d} require {expected}")]
    MatrixSize {
        record: usize,
        got: usize,
        l: u32,
        d: u32,
        expected: usize,
    },
    #[error("duplicate speaker {speaker} in pool")]
    DuplicateSpeaker { speaker: u32 },
    #[error("no content is spoken by two distinct speakers; parallel pairs are unsatisfiable")]
    UnsatisfiablePairs,
    #[error("split ratios {ratios:?} must be non-negative and sum to 1 (within 1e-9)")]
    BadRatios { ratios: [f64; 3] },
    #[error("split part {part} has ratio {ratio} but would receive no {unit}s")]
    EmptySplitPart {
        part: usize,
        ratio: f64,
        unit: &'static str,
    },
    #[error("time series has no frames")]
    EmptyTimeSeries,
    #[error("time series length {len} is not a multiple of width {width}")]
    RaggedTimeSeries { len: usize, width: usize },
    #[error("invalid synthetic config: {0}")]
    BadSyntheticConfig(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance: an `L x d` matrix of per-layer, time-mean-pooled encoder
/// features plus speaker and content identity.
///
/// Matrices are stored row-major, layer-major, in float32 — the canonical
/// on-disk precision. Math lifts them to float64.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbedding {
    pub utterance_id: u64,
    pub speaker_id: u32,
    pub content_id: u32,
    pub matrix: Vec<f32>,
}

impl UtteranceEmbedding {
    /// The matrix as an `[l, d]` float64 tensor.
    pub fn to_tensor(&self, l: usize, d: usize) -> Tensor {
        debug_assert_eq!(self.matrix.len(), l * d);
        Tensor::from_f32(&[l, d], &self.matrix)
    }
}

/// A set of utterance embeddings sharing `(L, d)` and a speaker pool.
///
/// Immutable after construction; anonymization produces new corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub l: u32,
    pub d: u32,
    /// Ordered speaker pool; every record's speaker belongs to it.
    pub speakers: Vec<u32>,
    pub records: Vec<UtteranceEmbedding>,
}

impl Corpus {
    pub fn new(
        l: u32,
        d: u32,
        speakers: Vec<u32>,
        records: Vec<UtteranceEmbedding>,
    ) -> Result<Corpus, DataError> {
        let corpus = Corpus {
            l,
            d,
            speakers,
            records,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.speakers {
            if !seen.insert(s) {
                return Err(DataError::DuplicateSpeaker { speaker: s });
            }
        }
        let expected = (self.l as usize) * (self.d as usize);
        for (i, r) in self.records.iter().enumerate() {
            if r.matrix.len() != expected {
                return Err(DataError::MatrixSize {
                    record: i,
                    got: r.matrix.len(),
                    l: self.l,
                    d: self.d,
                    expected,
                });
            }
            if !seen.contains(&r.speaker_id) {
                return Err(DataError::UnknownSpeaker {
                    record: i,
                    speaker: r.speaker_id,
                });
            }
            if r.matrix.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    record: i,
                    offset: 0,
                });
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.l as usize
    }

    pub fn dim(&self) -> usize {
        self.d as usize
    }

    /// Row index of a speaker in the pool order.
    pub fn speaker_index(&self, speaker_id: u32) -> Option<usize> {
        self.speakers.iter().position(|&s| s == speaker_id)
    }

    /// Speaker id -> pool index map for repeated lookups.
    pub fn speaker_index_map(&self) -> BTreeMap<u32, usize> {
        self.speakers
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i))
            .collect()
    }

    /// Stacks the given records into a `[n, l, d]` float64 tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let (l, d) = (self.layer_count(), self.dim());
        let mut values = Vec::with_capacity(indices.len() * l * d);
        for &i in indices {
            values.extend(self.records[i].matrix.iter().map(|&v| v as f64));
        }
        Tensor::new(&[indices.len(), l, d], values)
    }

    /// A copy with the same identities but new matrices (an anonymized view).
    /// Panics if the matrix count or sizes disagree.
    pub fn with_matrices(&self, matrices: Vec<Vec<f32>>) -> Corpus {
        assert_eq!(matrices.len(), self.records.len());
        let expected = (self.l as usize) * (self.d as usize);
        let records = self
            .records
            .iter()
            .zip(matrices)
            .map(|(r, m)| {
                assert_eq!(m.len(), expected);
                UtteranceEmbedding {
                    utterance_id: r.utterance_id,
                    speaker_id: r.speaker_id,
                    content_id: r.content_id,
                    matrix: m,
                }
            })
            .collect();
        Corpus {
            l: self.l,
            d: self.d,
            speakers: self.speakers.clone(),
            records,
        }
    }
}

/// Arithmetic mean over the time axis of a `T x width` frame matrix.
pub fn pool_time_series(frames: &[f64], width: usize) -> Result<Vec<f64>, DataError> {
    if width == 0 || frames.is_empty() {
        return Err(DataError::EmptyTimeSeries);
    }
    if frames.len() % width != 0 {
        return Err(DataError::RaggedTimeSeries {
            len: frames.len(),
            width,
        });
    }
    let t = frames.len() / width;
    let mut out = vec![0.0; width];
    for row in frames.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= t as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_corpus() -> Corpus {
        let records = vec![
            UtteranceEmbedding {
                utterance_id: 0,
                speaker_id: 10,
                content_id: 0,
                matrix: vec![0.5; 6],
            },
            UtteranceEmbedding {
                utterance_id: 1,
                speaker_id: 11,
                content_id: 0,
                matrix: vec![-1.25; 6],
            },
        ];
        Corpus::new(2, 3, vec![10, 11], records).unwrap()
    }

    #[test]
    fn validation_accepts_consistent_corpus() {
        tiny_corpus();
    }

    #[test]
    fn validation_rejects_unknown_speaker() {
        let mut c = tiny_corpus();
        c.records[1].speaker_id = 99;
        assert!(matches!(
            c.validate(),
            Err(DataError::UnknownSpeaker { record: 1, speaker: 99 })
        ));
    }

    #[test]
    fn validation_rejects_wrong_matrix_size() {
        let mut c = tiny_corpus();
        c.records[0].matrix.pop();
        assert!(matches!(c.validate(), Err(DataError::MatrixSize { record: 0, .. })));
    }

    #[test]
    fn pool_constant_frames() {
        let pooled = pool_time_series(&[3.5, 3.5, 3.5, 3.5], 2).unwrap();
        assert_eq!(pooled, vec![3.5, 3.5]);
    }

    #[test]
    fn pool_two_frames() {
        let pooled = pool_time_series(&[0.0, 2.0], 1).unwrap();
        assert_eq!(pooled, vec![1.0]);
    }

    #[test]
    fn pool_matches_per_column_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (t, d) = (7, 5);
        let frames: Vec<f64> = (0..t * d).map(|_| rng.random::<f64>()).collect();
        let pooled = pool_time_series(&frames, d).unwrap();
        for col in 0..d {
            let mut acc = 0.0;
            for row in 0..t {
                acc += frames[row * d + col];
            }
            assert_eq!(pooled[col], acc / t as f64);
        }
    }

    #[test]
    fn pool_empty_is_an_error() {
        assert!(matches!(
            pool_time_series(&[], 3),
            Err(DataError::EmptyTimeSeries)
        ));
    }
}
