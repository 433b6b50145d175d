//! Deterministic corpus partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Corpus, DataError};

/// What a split ratio applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitUnit {
    /// Partition the speaker pool; no speaker appears in two parts.
    Speaker,
    /// Partition records directly.
    Utterance,
    /// Partition each speaker's records separately, so every part keeps
    /// every speaker (the split used by identification probes).
    SpeakerStratified,
}

/// Splits a corpus into (train, val, test). Ratios must be non-negative and
/// sum to 1 within 1e-9; a part with a positive ratio that would come out
/// empty is an error, a part with ratio 0 is allowed to be empty.
pub fn split(
    corpus: &Corpus,
    ratios: [f64; 3],
    unit: SplitUnit,
    seed: u64,
) -> Result<[Corpus; 3], DataError> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios { ratios });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match unit {
        SplitUnit::Speaker => {
            let mut speakers = corpus.speakers.clone();
            speakers.shuffle(&mut rng);
            let groups = partition(&speakers, ratios);
            check_nonempty(&groups, ratios, "speaker")?;
            let mut parts = Vec::with_capacity(3);
            for group in &groups {
                let keep: std::collections::BTreeSet<u32> = group.iter().copied().collect();
                // Preserve the original pool order within each part.
                let pool: Vec<u32> = corpus
                    .speakers
                    .iter()
                    .copied()
                    .filter(|s| keep.contains(s))
                    .collect();
                let records = corpus
                    .records
                    .iter()
                    .filter(|r| keep.contains(&r.speaker_id))
                    .cloned()
                    .collect();
                parts.push(Corpus {
                    l: corpus.l,
                    d: corpus.d,
                    speakers: pool,
                    records,
                });
            }
            Ok(into_array(parts))
        }
        SplitUnit::Utterance => {
            let mut indices: Vec<usize> = (0..corpus.records.len()).collect();
            indices.shuffle(&mut rng);
            let groups = partition(&indices, ratios);
            check_nonempty(&groups, ratios, "record")?;
            Ok(into_array(
                groups.iter().map(|g| subset(corpus, g)).collect(),
            ))
        }
        SplitUnit::SpeakerStratified => {
            let mut groups: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            for &spk in &corpus.speakers {
                let mut indices: Vec<usize> = corpus
                    .records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.speaker_id == spk)
                    .map(|(i, _)| i)
                    .collect();
                indices.shuffle(&mut rng);
                for (part, chunk) in partition(&indices, ratios).into_iter().enumerate() {
                    groups[part].extend(chunk);
                }
            }
            for g in groups.iter_mut() {
                g.sort_unstable();
            }
            check_nonempty(&groups.to_vec(), ratios, "record")?;
            Ok(into_array(groups.iter().map(|g| subset(corpus, g)).collect()))
        }
    }
}

/// Cumulative-rounding partition: boundaries at `round(sum(r[..=i]) * n)`.
fn partition<T: Copy>(items: &[T], ratios: [f64; 3]) -> Vec<Vec<T>> {
    let n = items.len() as f64;
    let mut bounds = [0usize; 4];
    let mut acc = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        bounds[i + 1] = (acc * n).round().min(n) as usize;
    }
    bounds[3] = items.len();
    (0..3)
        .map(|i| items[bounds[i]..bounds[i + 1].max(bounds[i])].to_vec())
        .collect()
}

fn check_nonempty<T>(groups: &[Vec<T>], ratios: [f64; 3], unit: &'static str) -> Result<(), DataError> {
    for (part, (group, &ratio)) in groups.iter().zip(ratios.iter()).enumerate() {
        if ratio > 0.0 && group.is_empty() {
            return Err(DataError::EmptySplitPart { part, ratio, unit });
        }
    }
    Ok(())
}

fn subset(corpus: &Corpus, indices: &[usize]) -> Corpus {
    Corpus {
        l: corpus.l,
        d: corpus.d,
        speakers: corpus.speakers.clone(),
        records: indices.iter().map(|&i| corpus.records[i].clone()).collect(),
    }
}

fn into_array(mut parts: Vec<Corpus>) -> [Corpus; 3] {
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    [train, val, test]
}
