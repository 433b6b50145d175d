//! Laplace-noise baseline: clip every element to a fixed range, then add
//! independent Laplace(2/epsilon) noise per dimension. Clipping strictly
//! precedes noising and nothing is clipped afterwards.
//!
//! Exposed as a mechanism knob only; no formal differential-privacy
//! accounting is claimed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Corpus;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("clip range [{lo}, {hi}] is empty")]
    BadClipRange { lo: f64, hi: f64 },
    #[error("non-finite input value at element {index}")]
    NonFiniteInput { index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceConfig {
    pub epsilon: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub seed: u64,
}

impl LaplaceConfig {
    pub fn new(epsilon: f64, seed: u64) -> LaplaceConfig {
        LaplaceConfig {
            epsilon,
            clip_lo: -1.0,
            clip_hi: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(BaselineError::BadEpsilon(self.epsilon));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(BaselineError::BadClipRange {
                lo: self.clip_lo,
                hi: self.clip_hi,
            });
        }
        Ok(())
    }

    /// Noise scale `b = 2 / epsilon`.
    pub fn scale(&self) -> f64 {
        2.0 / self.epsilon
    }
}

/// Inverse-CDF map from `u` in (-0.5, 0.5) to a Laplace(0, scale) draw.
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    debug_assert!(u > -0.5 && u < 0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// One Laplace(0, scale) sample by inverse-CDF of a uniform draw.
pub fn sample_laplace<R: Rng>(scale: f64, rng: &mut R) -> f64 {
    assert!(scale > 0.0, "laplace scale must be positive, got {scale}");
    // r = 0 would map to the -0.5 endpoint where the inverse CDF diverges.
    let mut r = rng.random::<f64>();
    while r == 0.0 {
        r = rng.random::<f64>();
    }
    laplace_from_uniform(r - 0.5, scale)
}

/// Clips each element to `[clip_lo, clip_hi]`, then adds one independent
/// Laplace(2/epsilon) draw per element.
pub fn laplace_anonymize_values<R: Rng>(
    values: &[f64],
    cfg: &LaplaceConfig,
    rng: &mut R,
) -> Result<Vec<f64>, BaselineError> {
    cfg.validate()?;
    let scale = cfg.scale();
    let mut out = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(BaselineError::NonFiniteInput { index });
        }
        let clipped = v.clamp(cfg.clip_lo, cfg.clip_hi);
        out.push(clipped + sample_laplace(scale, rng));
    }
    Ok(out)
}

/// Applies the mechanism to every record matrix; identities and labels are
/// untouched. Deterministic in `cfg.seed`.
pub fn laplace_anonymize_corpus(
    corpus: &Corpus,
    cfg: &LaplaceConfig,
) -> Result<Corpus, BaselineError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut matrices = Vec::with_capacity(corpus.records.len());
    for r in &corpus.records {
        let values: Vec<f64> = r.matrix.iter().map(|&v| v as f64).collect();
        let noised = laplace_anonymize_values(&values, cfg, &mut rng)?;
        matrices.push(noised.iter().map(|&v| v as f32).collect());
    }
    Ok(corpus.with_matrices(matrices))
}
