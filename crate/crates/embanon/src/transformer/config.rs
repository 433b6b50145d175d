//! Model configuration and error type.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::DataError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match model (batch x {l} x {d})")]
    InputShape { got: Vec<usize>, l: u32, d: u32 },
    #[error("target assignment covers batch {got_batch} x {got_l}, input is batch {batch} x {l}")]
    TargetShape {
        got_batch: usize,
        got_l: usize,
        batch: usize,
        l: usize,
    },
    #[error("target speaker index {index} out of range for {n_speakers} speakers")]
    SpeakerIndex { index: usize, n_speakers: u32 },
    #[error("speaker {speaker} is not in the model's speaker pool")]
    UnknownSpeaker { speaker: u32 },
    #[error("corpus is {corpus_l}x{corpus_d} but the model expects {model_l}x{model_d}")]
    CorpusDims {
        corpus_l: u32,
        corpus_d: u32,
        model_l: u32,
        model_d: u32,
    },
    #[error("training needs at least one pair per step")]
    EmptyBatch,
    #[error("checkpoint parameter {name:?}: {problem}")]
    CheckpointParam { name: String, problem: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of the privacy transformer.
///
/// `l` is the number of input rows per utterance (the pre-trained encoder's
/// layer count); `n_layers` is the depth of this model's own encoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyTransformerConfig {
    pub l: u32,
    pub d: u32,
    pub d_spk: u32,
    pub d_layer: u32,
    pub n_layers: u32,
    pub n_heads: u32,
    pub d_ff: u32,
    pub n_speakers: u32,
    pub dropout: f64,
    pub seed: u64,
}

impl PrivacyTransformerConfig {
    /// The published full-size configuration for a given corpus geometry:
    /// 256/128 conditioning widths, 5 encoder layers, 8 heads, 4608 hidden.
    pub fn full_size(l: u32, d: u32, n_speakers: u32, seed: u64) -> Self {
        PrivacyTransformerConfig {
            l,
            d,
            d_spk: 256,
            d_layer: 128,
            n_layers: 5,
            n_heads: 8,
            d_ff: 4608,
            n_speakers,
            dropout: 0.1,
            seed,
        }
    }

    /// A small configuration that trains quickly on desk-scale corpora.
    pub fn compact(l: u32, d: u32, n_speakers: u32, seed: u64) -> Self {
        PrivacyTransformerConfig {
            l,
            d,
            d_spk: 16,
            d_layer: 8,
            n_layers: 2,
            n_heads: 4,
            d_ff: 4 * (d + 16 + 8),
            n_speakers,
            dropout: 0.1,
            seed,
        }
    }

    /// Width of the encoder tokens: `d + d_spk + d_layer`.
    pub fn model_dim(&self) -> usize {
        (self.d + self.d_spk + self.d_layer) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.n_heads as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.l == 0
            || self.d == 0
            || self.d_spk == 0
            || self.d_layer == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return fail("all dimensions must be positive".into());
        }
        if self.n_speakers == 0 {
            return fail("speaker pool must not be empty".into());
        }
        let md = self.model_dim();
        if md % self.n_heads as usize != 0 {
            return fail(format!(
                "model dim {md} (= {} + {} + {}) is not divisible by {} heads",
                self.d, self.d_spk, self.d_layer, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_matches_published_dims() {
        let cfg = PrivacyTransformerConfig::full_size(12, 768, 110, 0);
        assert_eq!(cfg.model_dim(), 1152);
        assert_eq!(cfg.head_dim(), 144);
        cfg.validate().unwrap();
    }

    #[test]
    fn indivisible_model_dim_is_rejected() {
        let mut cfg = PrivacyTransformerConfig::full_size(12, 768, 10, 0);
        cfg.n_heads = 7;
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    }
}
