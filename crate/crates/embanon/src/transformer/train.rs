//! Pair-supervised training of the privacy transformer.
//!
//! Each step samples parallel pairs (same content, different speakers),
//! conditions the model on the target speaker uniformly across all layers,
//! and descends the mean-squared error against the target embedding with
//! plain SGD. A fraction of eligible contents is held out; the per-epoch
//! validation pair loss selects the parameters that are kept.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, PairIndex, ParallelPair};
use crate::numerics::{self, mse_loss, sgd_step, zero_grads};

use super::config::ModelError;
use super::model::{ForwardMode, PrivacyTransformer, TargetAssignment};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            lr: 1e-3,
            batch: 32,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_per_epoch: usize,
    /// Mean pre-step loss per epoch.
    pub train_loss: Vec<f64>,
    /// Pair loss on held-out contents per epoch (empty when no contents
    /// could be held out).
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

fn pair_batch(
    model: &PrivacyTransformer,
    corpus: &Corpus,
    pairs: &[ParallelPair],
) -> Result<(numerics::Tensor, numerics::Tensor, TargetAssignment), ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let src: Vec<usize> = pairs.iter().map(|p| p.src).collect();
    let tgt: Vec<usize> = pairs.iter().map(|p| p.tgt).collect();
    let mut target_speakers = Vec::with_capacity(pairs.len());
    for &t in &tgt {
        target_speakers.push(model.speaker_index(corpus.records[t].speaker_id)?);
    }
    Ok((
        corpus.batch_tensor(&src),
        corpus.batch_tensor(&tgt),
        TargetAssignment::uniform(model.config.l as usize, &target_speakers),
    ))
}

/// One SGD step over a batch of parallel pairs. Returns the pre-step loss.
pub fn train_step(
    model: &PrivacyTransformer,
    corpus: &Corpus,
    pairs: &[ParallelPair],
    lr: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64, ModelError> {
    let (z_src, z_tgt, targets) = pair_batch(model, corpus, pairs)?;
    let predicted = model.forward(&z_src, &targets, ForwardMode::Train { dropout_rng })?;
    let loss = mse_loss(&predicted, &z_tgt);
    let value = loss.item();

    let params = model.parameters();
    zero_grads(&params);
    numerics::backward(&loss);
    sgd_step(&params, lr);
    Ok(value)
}

/// Mean pair loss in eval mode (no dropout, no gradients).
pub fn pair_loss(
    model: &PrivacyTransformer,
    corpus: &Corpus,
    pairs: &[ParallelPair],
) -> Result<f64, ModelError> {
    let (z_src, z_tgt, targets) = pair_batch(model, corpus, pairs)?;
    let predicted = model.forward(&z_src, &targets, ForwardMode::Eval)?;
    Ok(mse_loss(&predicted, &z_tgt).item())
}

/// Trains in place and returns the loss curves. The model ends at the
/// best-validation parameters (or the final ones when nothing could be
/// held out for validation). `epochs = 0` leaves the model untouched.
pub fn train(
    model: &mut PrivacyTransformer,
    corpus: &Corpus,
    opts: &TrainOptions,
) -> Result<TrainReport, ModelError> {
    let cfg = &model.config;
    if corpus.l != cfg.l || corpus.d != cfg.d {
        return Err(ModelError::CorpusDims {
            corpus_l: corpus.l,
            corpus_d: corpus.d,
            model_l: cfg.l,
            model_d: cfg.d,
        });
    }
    if opts.epochs == 0 {
        return Ok(TrainReport::default());
    }

    // Contents spoken by at least two speakers can form pairs; a fraction
    // of them is held out for validation.
    let mut speakers_per_content: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for r in &corpus.records {
        speakers_per_content
            .entry(r.content_id)
            .or_default()
            .insert(r.speaker_id);
    }
    let eligible: Vec<u32> = speakers_per_content
        .into_iter()
        .filter(|(_, spks)| spks.len() >= 2)
        .map(|(c, _)| c)
        .collect();

    let mut split_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed_5011));
    let mut shuffled = eligible;
    shuffled.shuffle(&mut split_rng);
    let mut val_count = (opts.val_fraction * shuffled.len() as f64).round() as usize;
    val_count = val_count.min(shuffled.len().saturating_sub(1));
    let val_contents: BTreeSet<u32> = shuffled[..val_count].iter().copied().collect();

    let train_index = PairIndex::build_filtered(corpus, |i| {
        !val_contents.contains(&corpus.records[i].content_id)
    })?;
    let val_pairs: Vec<ParallelPair> = if val_count > 0 {
        let val_index = PairIndex::build_filtered(corpus, |i| {
            val_contents.contains(&corpus.records[i].content_id)
        })?;
        let n = opts.batch.max(val_index.record_count().min(256));
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed_5a1d));
        (0..n).map(|_| val_index.sample(&mut rng)).collect()
    } else {
        Vec::new()
    };

    let steps_per_epoch = (train_index.record_count() / opts.batch).max(1);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed_d409));

    let mut report = TrainReport {
        steps_per_epoch,
        ..TrainReport::default()
    };
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;

    for epoch in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let pairs: Vec<ParallelPair> = (0..opts.batch)
                .map(|_| train_index.sample(&mut sample_rng))
                .collect();
            epoch_loss += train_step(model, corpus, &pairs, opts.lr, &mut dropout_rng)?;
        }
        report.train_loss.push(epoch_loss / steps_per_epoch as f64);

        if !val_pairs.is_empty() {
            let vl = pair_loss(model, corpus, &val_pairs)?;
            report.val_loss.push(vl);
            let improved = best.as_ref().is_none_or(|(_, b, _)| vl < *b);
            if improved {
                best = Some((epoch, vl, model.snapshot()));
            }
        }
        log::debug!(
            "epoch {epoch}: train loss {:.6}{}",
            report.train_loss[epoch],
            report
                .val_loss
                .get(epoch)
                .map(|v| format!(", val loss {v:.6}"))
                .unwrap_or_default()
        );
    }

    if let Some((epoch, vl, snapshot)) = best {
        model.restore(&snapshot);
        report.best_epoch = Some(epoch);
        report.best_val_loss = Some(vl);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic, sample_parallel_pairs, SyntheticConfig};
    use crate::transformer::config::PrivacyTransformerConfig;

    fn small_corpus() -> Corpus {
        generate_synthetic(&SyntheticConfig {
            n_speakers: 6,
            n_contents: 10,
            l: 3,
            d: 8,
            speaker_latent: 3,
            content_latent: 3,
            noise_sigma: 0.02,
            seed: 5,
        })
        .unwrap()
    }

    fn small_model(corpus: &Corpus, dropout: f64) -> PrivacyTransformer {
        let cfg = PrivacyTransformerConfig {
            l: corpus.l,
            d: corpus.d,
            d_spk: 4,
            d_layer: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            n_speakers: corpus.speakers.len() as u32,
            dropout,
            seed: 3,
        };
        PrivacyTransformer::init(cfg, &corpus.speakers).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged_and_loss_finite() {
        let corpus = small_corpus();
        let model = small_model(&corpus, 0.0);
        let before = model.snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sample_parallel_pairs(&corpus, 8, &mut rng).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(2);
        let loss = train_step(&model, &corpus, &pairs, 0.0, &mut drng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(model.snapshot(), before);
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        // mse against itself is the loss lower bound of the objective
        let corpus = small_corpus();
        let idx = [0usize, 1, 2];
        let z = corpus.batch_tensor(&idx);
        assert_eq!(mse_loss(&z, &z).item(), 0.0);
    }

    #[test]
    fn repeated_batch_descends() {
        let corpus = small_corpus();
        let model = small_model(&corpus, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs = sample_parallel_pairs(&corpus, 16, &mut rng).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(8);
        let first = train_step(&model, &corpus, &pairs, 1e-3, &mut drng).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&model, &corpus, &pairs, 1e-3, &mut drng).unwrap();
        }
        assert!(
            last < first,
            "loss did not descend on a repeated batch: {first} -> {last}"
        );
    }

    #[test]
    fn zero_epochs_is_identity() {
        let corpus = small_corpus();
        let mut model = small_model(&corpus, 0.1);
        let before = model.snapshot();
        let report = train(&mut model, &corpus, &TrainOptions { epochs: 0, ..Default::default() })
            .unwrap();
        assert_eq!(model.snapshot(), before);
        assert!(report.train_loss.is_empty());
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let corpus = small_corpus();
        let opts = TrainOptions {
            epochs: 2,
            batch: 8,
            ..Default::default()
        };
        let mut a = small_model(&corpus, 0.1);
        let ra = train(&mut a, &corpus, &opts).unwrap();
        let mut b = small_model(&corpus, 0.1);
        let rb = train(&mut b, &corpus, &opts).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn training_reduces_loss_on_synthetic_data() {
        let corpus = small_corpus();
        let mut model = small_model(&corpus, 0.0);
        let report = train(
            &mut model,
            &corpus,
            &TrainOptions {
                epochs: 30,
                batch: 8,
                lr: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        let first = report.train_loss[0];
        let last = *report.train_loss.last().unwrap();
        assert!(
            last < 0.5 * first,
            "train loss {first} -> {last} did not halve"
        );
    }

    #[test]
    fn mismatched_corpus_dims_error() {
        let corpus = small_corpus();
        let mut model = small_model(&corpus, 0.0);
        let other = generate_synthetic(&SyntheticConfig {
            n_speakers: 4,
            n_contents: 4,
            l: 2,
            d: 8,
            speaker_latent: 2,
            content_latent: 2,
            noise_sigma: 0.0,
            seed: 1,
        })
        .unwrap();
        assert!(matches!(
            train(&mut model, &other, &TrainOptions::default()),
            Err(ModelError::CorpusDims { .. })
        ));
    }

    #[test]
    fn unknown_target_speaker_is_an_index_error() {
        let corpus = small_corpus();
        let model = small_model(&corpus, 0.0);
        let mut bad = corpus.clone();
        bad.speakers.push(77);
        for r in bad.records.iter_mut().take(2) {
            r.speaker_id = 77;
        }
        let pairs = vec![ParallelPair { src: 2, tgt: 0 }];
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            train_step(&model, &bad, &pairs, 1e-3, &mut drng),
            Err(ModelError::UnknownSpeaker { speaker: 77 })
        ));
    }
}
