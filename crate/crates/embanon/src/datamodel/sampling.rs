//! Parallel-pair sampling: two utterances with the same content from two
//! different speakers.

use std::collections::BTreeMap;

use rand::Rng;

use super::corpus::{Corpus, DataError};

/// Indices into `Corpus::records` of a source/target utterance pair with
/// equal content and distinct speakers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub src: usize,
    pub tgt: usize,
}

/// Sampling table: eligible contents with their per-speaker record indices.
pub struct PairIndex {
    /// (content_id, per-speaker record lists), contents and speakers sorted.
    contents: Vec<(u32, Vec<(u32, Vec<usize>)>)>,
}

impl PairIndex {
    /// Builds the index over contents spoken by at least two distinct
    /// speakers. Errors if there is none.
    pub fn build(corpus: &Corpus) -> Result<PairIndex, DataError> {
        Self::build_filtered(corpus, |_| true)
    }

    /// Same as [`PairIndex::build`] but restricted to records accepted by
    /// the filter (used to carve train/validation content splits).
    pub fn build_filtered(
        corpus: &Corpus,
        keep: impl Fn(usize) -> bool,
    ) -> Result<PairIndex, DataError> {
        let mut by_content: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        for (i, r) in corpus.records.iter().enumerate() {
            if keep(i) {
                by_content
                    .entry(r.content_id)
                    .or_default()
                    .entry(r.speaker_id)
                    .or_default()
                    .push(i);
            }
        }
        let contents: Vec<(u32, Vec<(u32, Vec<usize>)>)> = by_content
            .into_iter()
            .filter(|(_, speakers)| speakers.len() >= 2)
            .map(|(c, speakers)| (c, speakers.into_iter().collect()))
            .collect();
        if contents.is_empty() {
            return Err(DataError::UnsatisfiablePairs);
        }
        Ok(PairIndex { contents })
    }

    /// Number of records covered by eligible contents.
    pub fn record_count(&self) -> usize {
        self.contents
            .iter()
            .map(|(_, speakers)| speakers.iter().map(|(_, recs)| recs.len()).sum::<usize>())
            .sum()
    }

    /// Draws one pair: content uniform among eligible contents, then two
    /// distinct speakers uniform among that content's speakers, then one
    /// utterance per chosen (content, speaker) cell.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> ParallelPair {
        let (_, speakers) = &self.contents[rng.random_range(0..self.contents.len())];
        let a = rng.random_range(0..speakers.len());
        let mut b = rng.random_range(0..speakers.len() - 1);
        if b >= a {
            b += 1;
        }
        let pick = |cell: &(u32, Vec<usize>), rng: &mut R| cell.1[rng.random_range(0..cell.1.len())];
        let src = pick(&speakers[a], rng);
        let tgt = pick(&speakers[b], rng);
        ParallelPair { src, tgt }
    }
}

/// Draws `n` parallel pairs with replacement across draws.
pub fn sample_parallel_pairs<R: Rng>(
    corpus: &Corpus,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ParallelPair>, DataError> {
    let index = PairIndex::build(corpus)?;
    Ok((0..n).map(|_| index.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::corpus::UtteranceEmbedding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(utt: u64, spk: u32, content: u32) -> UtteranceEmbedding {
        UtteranceEmbedding {
            utterance_id: utt,
            speaker_id: spk,
            content_id: content,
            matrix: vec![0.0; 4],
        }
    }

    #[test]
    fn forced_pair_with_two_speakers_one_content() {
        let corpus = Corpus::new(
            2,
            2,
            vec![1, 2],
            vec![record(0, 1, 5), record(1, 2, 5)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = sample_parallel_pairs(&corpus, 8, &mut rng).unwrap();
        for p in pairs {
            assert!(p == ParallelPair { src: 0, tgt: 1 } || p == ParallelPair { src: 1, tgt: 0 });
        }
    }

    #[test]
    fn unique_contents_are_unsatisfiable() {
        let corpus = Corpus::new(
            2,
            2,
            vec![1, 2],
            vec![record(0, 1, 5), record(1, 2, 6)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_parallel_pairs(&corpus, 1, &mut rng),
            Err(DataError::UnsatisfiablePairs)
        ));
    }

    #[test]
    fn every_sampled_pair_satisfies_invariants() {
        // 3 speakers x 3 contents, one cell missing.
        let mut records = Vec::new();
        let mut utt = 0;
        for spk in 0..3u32 {
            for content in 0..3u32 {
                if spk == 2 && content == 0 {
                    continue;
                }
                records.push(record(utt, spk, content));
                utt += 1;
            }
        }
        let corpus = Corpus::new(2, 2, vec![0, 1, 2], records).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in sample_parallel_pairs(&corpus, 500, &mut rng).unwrap() {
            let (s, t) = (&corpus.records[p.src], &corpus.records[p.tgt]);
            assert_eq!(s.content_id, t.content_id);
            assert_ne!(s.speaker_id, t.speaker_id);
        }
    }

    #[test]
    fn pair_frequencies_are_uniform_within_three_sigma() {
        // 3 speakers x 2 contents: 6 eligible (content, unordered-pair)
        // combinations, each with probability 1/6.
        let mut records = Vec::new();
        let mut utt = 0;
        for spk in 0..3u32 {
            for content in 0..2u32 {
                records.push(record(utt, spk, content));
                utt += 1;
            }
        }
        let corpus = Corpus::new(2, 2, vec![0, 1, 2], records).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        let draws = 100_000usize;
        let mut counts: BTreeMap<(u32, u32, u32), usize> = BTreeMap::new();
        for p in sample_parallel_pairs(&corpus, draws, &mut rng).unwrap() {
            let (s, t) = (&corpus.records[p.src], &corpus.records[p.tgt]);
            let (lo, hi) = if s.speaker_id < t.speaker_id {
                (s.speaker_id, t.speaker_id)
            } else {
                (t.speaker_id, s.speaker_id)
            };
            *counts.entry((s.content_id, lo, hi)).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (combo, count) in counts {
            let dev = (count as f64 - mean).abs();
            assert!(
                dev <= 3.0 * sigma,
                "combination {combo:?} count {count} deviates {dev:.1} > 3 sigma ({:.1})",
                3.0 * sigma
            );
        }
    }
}
