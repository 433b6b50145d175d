//! Probe training (Adam + early stopping), evaluation, and the
//! label-stratified task runner shared by utility probes and the
//! speaker-identification attack.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::Corpus;
use crate::numerics::{adam_step, backward, cross_entropy_loss, zero_grads, AdamState};

use super::metrics::{compute_metrics, Metrics};
use super::model::{ProbeConfig, ProbeError, ProbeModel};

/// utterance_id -> class label.
pub type Labels = BTreeMap<u64, u32>;

/// Speaker-identity labels straight off the records.
pub fn speaker_labels(corpus: &Corpus) -> Labels {
    corpus
        .records
        .iter()
        .map(|r| (r.utterance_id, r.speaker_id))
        .collect()
}

/// `content_id mod k` labels: the intent-like utility task on synthetic
/// corpora.
pub fn content_labels(corpus: &Corpus, k: u32) -> Labels {
    assert!(k > 0);
    corpus
        .records
        .iter()
        .map(|r| (r.utterance_id, r.content_id % k))
        .collect()
}

fn labeled_indices(corpus: &Corpus, labels: &Labels) -> Vec<usize> {
    corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| labels.contains_key(&r.utterance_id))
        .map(|(i, _)| i)
        .collect()
}

/// Trains a probe on every labeled record of `corpus`, holding out
/// `val_fraction` of them for early stopping on validation accuracy.
/// Returns the best-validation model; `epochs = 0` returns the initialized
/// model untouched.
pub fn train_probe(
    corpus: &Corpus,
    labels: &Labels,
    cfg: &ProbeConfig,
) -> Result<ProbeModel, ProbeError> {
    let indices = labeled_indices(corpus, labels);
    if indices.is_empty() {
        return Err(ProbeError::EmptyEvaluation);
    }
    let mut classes: Vec<u32> = indices
        .iter()
        .map(|&i| labels[&corpus.records[i].utterance_id])
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(ProbeError::DegenerateTask);
    }

    let model = ProbeModel::init(corpus.layer_count(), corpus.dim(), classes, cfg);
    if cfg.epochs == 0 {
        return Ok(model);
    }
    let class_index: BTreeMap<u32, usize> = model
        .classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let target_of = |i: usize| class_index[&labels[&corpus.records[i].utterance_id]];

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9042_0af1));
    let mut pool = indices;
    pool.shuffle(&mut shuffle_rng);
    let mut val_count = (cfg.val_fraction * pool.len() as f64).round() as usize;
    val_count = val_count.min(pool.len().saturating_sub(1));
    let (val_set, train_set) = pool.split_at(val_count);
    let val_targets: Vec<u32> = val_set
        .iter()
        .map(|&i| labels[&corpus.records[i].utterance_id])
        .collect();

    let params = model.parameters();
    let mut adam = AdamState::new(&params);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut since_improvement = 0usize;
    let mut order: Vec<usize> = train_set.to_vec();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            let targets: Vec<usize> = chunk.iter().map(|&i| target_of(i)).collect();
            let logits = model.forward_batch(corpus, chunk);
            let loss = cross_entropy_loss(&logits, &targets);
            zero_grads(&params);
            backward(&loss);
            adam_step(&params, &mut adam, cfg.lr, 0.9, 0.999, 1e-8);
        }

        if !val_set.is_empty() {
            let predictions = model.predict(corpus, val_set);
            let correct = predictions
                .iter()
                .zip(&val_targets)
                .filter(|(p, a)| p == a)
                .count();
            let acc = correct as f64 / val_set.len() as f64;
            let improved = best.as_ref().is_none_or(|(b, _)| acc > *b);
            if improved {
                best = Some((acc, model.snapshot()));
                since_improvement = 0;
            } else {
                since_improvement += 1;
                if since_improvement >= cfg.patience {
                    log::debug!("probe early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }

    if let Some((_, snapshot)) = best {
        model.restore(&snapshot);
    }
    Ok(model)
}

/// Test metrics of a trained probe over the labeled records of `corpus`.
/// The class space is the union of the probe's classes and the labels seen.
pub fn evaluate(model: &ProbeModel, corpus: &Corpus, labels: &Labels) -> Result<Metrics, ProbeError> {
    if corpus.layer_count() != model.l || corpus.dim() != model.d {
        return Err(ProbeError::DimMismatch {
            corpus_l: corpus.l,
            corpus_d: corpus.d,
            probe_l: model.l,
            probe_d: model.d,
        });
    }
    let indices = labeled_indices(corpus, labels);
    if indices.is_empty() {
        return Err(ProbeError::EmptyEvaluation);
    }
    let actual: Vec<u32> = indices
        .iter()
        .map(|&i| labels[&corpus.records[i].utterance_id])
        .collect();
    let predicted = model.predict(corpus, &indices);
    let mut space = model.classes.clone();
    space.extend(&actual);
    Ok(compute_metrics(&actual, &predicted, Some(&space)))
}

/// Outcome of one probe task on one (possibly anonymized) corpus.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub metrics: Metrics,
    pub train_records: usize,
    pub test_records: usize,
}

/// Label-stratified utterance split, probe training on the train part,
/// metrics on the held-out part. The split depends only on record order,
/// labels, and `cfg.split_seed`, so arms sharing those see identical splits.
pub fn run_probe_task(
    corpus: &Corpus,
    labels: &Labels,
    cfg: &ProbeConfig,
) -> Result<TaskOutcome, ProbeError> {
    let indices = labeled_indices(corpus, labels);
    if indices.is_empty() {
        return Err(ProbeError::EmptyEvaluation);
    }
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in &indices {
        by_label
            .entry(labels[&corpus.records[i].utterance_id])
            .or_default()
            .push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (_, mut members) in by_label {
        members.shuffle(&mut rng);
        let n_test = (cfg.test_fraction * members.len() as f64).round() as usize;
        let n_test = n_test.min(members.len().saturating_sub(1));
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    if train_idx.is_empty() {
        return Err(ProbeError::EmptySplit { part: "train" });
    }
    if test_idx.is_empty() {
        return Err(ProbeError::EmptySplit { part: "test" });
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let subset = |ids: &[usize]| Corpus {
        l: corpus.l,
        d: corpus.d,
        speakers: corpus.speakers.clone(),
        records: ids.iter().map(|&i| corpus.records[i].clone()).collect(),
    };
    let train_corpus = subset(&train_idx);
    let test_corpus = subset(&test_idx);

    let model = train_probe(&train_corpus, labels, cfg)?;
    let metrics = evaluate(&model, &test_corpus, labels)?;
    Ok(TaskOutcome {
        metrics,
        train_records: train_idx.len(),
        test_records: test_idx.len(),
    })
}

/// The privacy metric: train a fresh probe to recover the original speaker
/// from (possibly anonymized) embeddings. Lower accuracy is better privacy.
pub fn sid_attack(corpus: &Corpus, cfg: &ProbeConfig) -> Result<TaskOutcome, ProbeError> {
    run_probe_task(corpus, &speaker_labels(corpus), cfg)
}
