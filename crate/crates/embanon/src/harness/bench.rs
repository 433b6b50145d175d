//! Anonymization efficiency benchmark: wall time of the anonymization pass
//! alone over a fixed set of utterances, plus process peak memory.
//!
//! Producing the embeddings themselves (the upstream encoder's job) is out
//! of the timed region by construction: the corpus already exists when the
//! clock starts.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{laplace_anonymize_corpus, LaplaceConfig};
use crate::datamodel::Corpus;
use crate::transformer::PrivacyTransformer;

use super::config::HarnessError;
use super::rss::peak_rss_bytes;

/// What gets timed.
pub enum BenchTarget<'a> {
    /// Copying the embeddings unchanged (the "original" arm).
    Identity,
    Laplace(&'a LaplaceConfig),
    Transformer(&'a PrivacyTransformer),
}

impl BenchTarget<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            BenchTarget::Identity => "original",
            BenchTarget::Laplace(_) => "laplace",
            BenchTarget::Transformer(_) => "privacy_transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub arm: String,
    pub n_utterances: usize,
    pub batch: usize,
    /// Requested worker cap. The current implementation is single-threaded;
    /// the value is recorded for provenance.
    pub threads: usize,
    pub wall_seconds: f64,
    pub per_utterance_seconds: f64,
    pub peak_rss_bytes: u64,
}

/// Times anonymization of the first `n` utterances of `corpus` in forward
/// batches of `batch`. `n = 0` measures nothing and returns near-zero time.
pub fn bench(
    target: &BenchTarget<'_>,
    corpus: &Corpus,
    n: usize,
    batch: usize,
    threads: usize,
    seed: u64,
) -> Result<BenchResult, HarnessError> {
    if n > corpus.records.len() {
        return Err(HarnessError::Config(format!(
            "bench needs {n} utterances but the corpus has {}",
            corpus.records.len()
        )));
    }
    let subset = Corpus {
        l: corpus.l,
        d: corpus.d,
        speakers: corpus.speakers.clone(),
        records: corpus.records[..n].to_vec(),
    };

    let start = Instant::now();
    if n > 0 {
        match target {
            BenchTarget::Identity => {
                let copy = subset.clone();
                std::hint::black_box(&copy);
            }
            BenchTarget::Laplace(cfg) => {
                let mut cfg = (*cfg).clone();
                cfg.seed = seed;
                let out = laplace_anonymize_corpus(&subset, &cfg)?;
                std::hint::black_box(&out);
            }
            BenchTarget::Transformer(model) => {
                let out = model.anonymize_corpus_batched(&subset, seed, batch)?;
                std::hint::black_box(&out);
            }
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64();

    Ok(BenchResult {
        arm: target.label().to_string(),
        n_utterances: n,
        batch,
        threads,
        wall_seconds,
        per_utterance_seconds: if n > 0 { wall_seconds / n as f64 } else { 0.0 },
        peak_rss_bytes: peak_rss_bytes(),
    })
}
