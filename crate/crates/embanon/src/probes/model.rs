//! The probe classifier: a learned convex combination of the `L` layer rows
//! (the featurizer) feeding a small MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Corpus, DataError};
use crate::numerics::{self, no_grad, Parameter, Tensor};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("task is degenerate: all labeled utterances share one class")]
    DegenerateTask,
    #[error("no labeled utterances to evaluate")]
    EmptyEvaluation,
    #[error("corpus is {corpus_l}x{corpus_d} but the probe expects {probe_l}x{probe_d}")]
    DimMismatch {
        corpus_l: u32,
        corpus_d: u32,
        probe_l: usize,
        probe_d: usize,
    },
    #[error("{part} split of a probe task is empty")]
    EmptySplit { part: &'static str },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    /// Early stopping: epochs without validation-accuracy improvement.
    pub patience: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of the training records held out for early stopping.
    pub val_fraction: f64,
    /// Fraction of labeled records reserved for test metrics by
    /// [`super::train::run_probe_task`].
    pub test_fraction: f64,
    /// Seed of the label-stratified train/test split; the harness shares it
    /// across arms so metric differences are attributable to anonymization.
    pub split_seed: u64,
    /// Pass the featurizer scalars through softmax (convex layer weights)
    /// instead of using them raw.
    pub softmax_featurizer: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: vec![256, 128],
            lr: 1e-3,
            epochs: 50,
            patience: 5,
            batch: 64,
            seed: 0,
            val_fraction: 0.1,
            test_fraction: 0.2,
            split_seed: 0,
            softmax_featurizer: true,
        }
    }
}

pub struct ProbeModel {
    /// `[1, l]` scalars, softmaxed into layer weights by default.
    pub featurizer_logits: Parameter,
    /// Hidden (weight, bias) pairs, ReLU between layers.
    pub hidden: Vec<(Parameter, Parameter)>,
    pub out_w: Parameter,
    pub out_b: Parameter,
    /// Class index -> label value, sorted ascending.
    pub classes: Vec<u32>,
    pub l: usize,
    pub d: usize,
    pub softmax_featurizer: bool,
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
        .collect();
    Tensor::new(&[rows, cols], values)
}

impl ProbeModel {
    /// Fresh probe: zero featurizer logits (uniform layer weights), Xavier
    /// hidden layers, zero output layer. The zero output layer makes the
    /// training trajectory equivariant under class relabeling.
    pub fn init(l: usize, d: usize, classes: Vec<u32>, cfg: &ProbeConfig) -> ProbeModel {
        assert!(!classes.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut hidden = Vec::with_capacity(cfg.hidden.len());
        let mut width = d;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            hidden.push((
                Parameter::new(format!("mlp.{i}.w"), xavier(&mut rng, width, h)),
                Parameter::new(format!("mlp.{i}.b"), Tensor::zeros(&[h])),
            ));
            width = h;
        }
        ProbeModel {
            featurizer_logits: Parameter::new("featurizer", Tensor::zeros(&[1, l])),
            hidden,
            out_w: Parameter::new("out.w", Tensor::zeros(&[width, classes.len()])),
            out_b: Parameter::new("out.b", Tensor::zeros(&[classes.len()])),
            classes,
            l,
            d,
            softmax_featurizer: cfg.softmax_featurizer,
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut params = vec![self.featurizer_logits.clone()];
        for (w, b) in &self.hidden {
            params.push(w.clone());
            params.push(b.clone());
        }
        params.push(self.out_w.clone());
        params.push(self.out_b.clone());
        params
    }

    /// The layer weights actually applied: softmax of the logits (a
    /// probability vector) or the raw logits when configured off.
    pub fn featurizer_weights(&self) -> Vec<f64> {
        if self.softmax_featurizer {
            numerics::softmax_last(&self.featurizer_logits.tensor).values()
        } else {
            self.featurizer_logits.tensor.values()
        }
    }

    /// Collapses an `[l, d]` embedding to `[1, d]` with the layer weights.
    pub fn featurize(&self, z: &Tensor) -> Tensor {
        let shape = z.shape();
        assert_eq!(
            shape,
            vec![self.l, self.d],
            "featurize: embedding {:?} does not match probe ({} x {})",
            shape,
            self.l,
            self.d
        );
        let weights = if self.softmax_featurizer {
            numerics::softmax_last(&self.featurizer_logits.tensor)
        } else {
            self.featurizer_logits.tensor.clone()
        };
        weights.matmul(z)
    }

    /// Logits for a batch of records: `[indices.len(), n_classes]`.
    pub fn forward_batch(&self, corpus: &Corpus, indices: &[usize]) -> Tensor {
        let (l, d) = (self.l, self.d);
        let rows: Vec<Tensor> = indices
            .iter()
            .map(|&i| self.featurize(&corpus.records[i].to_tensor(l, d)))
            .collect();
        let mut x = numerics::concat_rows(&rows);
        for (w, b) in &self.hidden {
            x = x.matmul(&w.tensor).add_bias(&b.tensor).relu();
        }
        x.matmul(&self.out_w.tensor).add_bias(&self.out_b.tensor)
    }

    /// Argmax class index per record; ties resolve to the lowest index.
    pub fn predict_indices(&self, corpus: &Corpus, indices: &[usize]) -> Vec<usize> {
        let _guard = no_grad();
        let logits = self.forward_batch(corpus, indices);
        let k = self.classes.len();
        logits.with_values(|values| {
            indices
                .iter()
                .enumerate()
                .map(|(row, _)| {
                    let row = &values[row * k..(row + 1) * k];
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        })
    }

    /// Predicted label values.
    pub fn predict(&self, corpus: &Corpus, indices: &[usize]) -> Vec<u32> {
        self.predict_indices(corpus, indices)
            .into_iter()
            .map(|c| self.classes[c])
            .collect()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|p| p.tensor.values()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) {
        let params = self.parameters();
        assert_eq!(params.len(), snapshot.len());
        for (p, values) in params.iter().zip(snapshot) {
            p.tensor.set_values(values);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(l: usize, d: usize) -> ProbeModel {
        ProbeModel::init(l, d, vec![0, 1], &ProbeConfig::default())
    }

    #[test]
    fn featurizer_weights_form_a_probability_vector() {
        let p = probe(4, 3);
        p.featurizer_logits
            .tensor
            .set_values(&[0.3, -2.0, 1.5, 0.0]);
        let w = p.featurizer_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn saturated_logits_select_a_single_layer() {
        let p = probe(3, 4);
        p.featurizer_logits.tensor.set_values(&[-100.0, 100.0, -100.0]);
        let z = Tensor::new(
            &[3, 4],
            vec![
                1.0, 2.0, 3.0, 4.0, //
                5.0, 6.0, 7.0, 8.0, //
                9.0, 10.0, 11.0, 12.0,
            ],
        );
        let out = p.featurize(&z).values();
        for (o, expected) in out.iter().zip([5.0, 6.0, 7.0, 8.0]) {
            assert!((o - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_logits_give_the_layer_mean() {
        let p = probe(2, 2);
        let z = Tensor::new(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]);
        let out = p.featurize(&z).values();
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!((out[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn featurizer_gradient_matches_finite_differences() {
        use crate::numerics::grad_check;
        let p = probe(4, 3);
        p.featurizer_logits
            .tensor
            .set_values(&[0.2, -0.4, 0.9, 0.1]);
        let z = Tensor::new(
            &[4, 3],
            (0..12).map(|i| (i as f64) * 0.37 - 1.5).collect(),
        );
        let probe_vec = Tensor::new(&[3, 1], vec![0.7, -0.3, 0.5]);
        let logits = p.featurizer_logits.tensor.clone();
        let err = grad_check(
            |ins| {
                let weights = numerics::softmax_last(&ins[0]);
                numerics::sum_all(&weights.matmul(&z).matmul(&probe_vec))
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
