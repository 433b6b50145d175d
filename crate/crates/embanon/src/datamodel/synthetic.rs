//! Synthetic corpus generator.
//!
//! Each utterance is a linear mix of a per-speaker latent and a per-content
//! latent plus isotropic noise, with independent mixing maps per layer:
//!
//! ```text
//! row(l) = W_s[l] * s_speaker + W_c[l] * c_content + sigma * eta
//! ```
//!
//! Latents are standard normal; mixing entries are N(0, 1/(p+q)) so rows
//! come out near unit variance. Everything is a pure function of the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, DataError, UtteranceEmbedding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_speakers: u32,
    pub n_contents: u32,
    pub l: u32,
    pub d: u32,
    /// Speaker latent width (p).
    pub speaker_latent: u32,
    /// Content latent width (q).
    pub content_latent: u32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_speakers: 40,
            n_contents: 200,
            l: 4,
            d: 32,
            speaker_latent: 8,
            content_latent: 8,
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::BadSyntheticConfig(msg.to_string()));
        if self.n_speakers < 2 {
            return bad("n_speakers must be at least 2");
        }
        if self.n_contents == 0 || self.l == 0 || self.d == 0 {
            return bad("n_contents, l, and d must be positive");
        }
        if self.speaker_latent == 0 || self.content_latent == 0 {
            return bad("latent widths must be positive");
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }
}

/// One record per (speaker, content) cell, fully determined by `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (l, d) = (cfg.l as usize, cfg.d as usize);
    let (p, q) = (cfg.speaker_latent as usize, cfg.content_latent as usize);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let speaker_latents: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| (0..p).map(|_| normal(&mut rng)).collect())
        .collect();
    let content_latents: Vec<Vec<f64>> = (0..cfg.n_contents)
        .map(|_| (0..q).map(|_| normal(&mut rng)).collect())
        .collect();

    let mix_std = 1.0 / ((p + q) as f64).sqrt();
    // Per layer: W_s (d x p) then W_c (d x q), row-major.
    let speaker_mix: Vec<Vec<f64>> = (0..l)
        .map(|_| (0..d * p).map(|_| mix_std * normal(&mut rng)).collect())
        .collect();
    let content_mix: Vec<Vec<f64>> = (0..l)
        .map(|_| (0..d * q).map(|_| mix_std * normal(&mut rng)).collect())
        .collect();

    let mut records = Vec::with_capacity((cfg.n_speakers * cfg.n_contents) as usize);
    for speaker in 0..cfg.n_speakers {
        let s = &speaker_latents[speaker as usize];
        for content in 0..cfg.n_contents {
            let c = &content_latents[content as usize];
            let mut matrix = Vec::with_capacity(l * d);
            for layer in 0..l {
                let ws = &speaker_mix[layer];
                let wc = &content_mix[layer];
                for row in 0..d {
                    let mut v = 0.0;
                    for (j, sj) in s.iter().enumerate() {
                        v += ws[row * p + j] * sj;
                    }
                    for (j, cj) in c.iter().enumerate() {
                        v += wc[row * q + j] * cj;
                    }
                    if cfg.noise_sigma > 0.0 {
                        v += cfg.noise_sigma * normal(&mut rng);
                    }
                    matrix.push(v as f32);
                }
            }
            records.push(UtteranceEmbedding {
                utterance_id: (speaker as u64) * (cfg.n_contents as u64) + content as u64,
                speaker_id: speaker,
                content_id: content,
                matrix,
            });
        }
    }

    Corpus::new(cfg.l, cfg.d, (0..cfg.n_speakers).collect(), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_a_pure_function_of_the_config() {
        let cfg = SyntheticConfig {
            n_speakers: 5,
            n_contents: 6,
            l: 3,
            d: 10,
            noise_sigma: 0.1,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 30);
    }

    #[test]
    fn noiseless_same_cell_is_identical() {
        let cfg = SyntheticConfig {
            n_speakers: 3,
            n_contents: 2,
            noise_sigma: 0.0,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.records[3].matrix, b.records[3].matrix);
    }

    #[test]
    fn speaker_difference_is_rank_one_at_p_equals_one() {
        // With a 1-dim speaker latent and no noise, two records sharing a
        // content differ by W_s[l] * (s_a - s_b): each layer's difference is
        // collinear with the layer's speaker mixing column.
        let cfg = SyntheticConfig {
            n_speakers: 4,
            n_contents: 3,
            l: 3,
            d: 12,
            speaker_latent: 1,
            content_latent: 5,
            noise_sigma: 0.0,
            seed: 123,
        };
        let corpus = generate_synthetic(&cfg).unwrap();
        let (l, d) = (corpus.layer_count(), corpus.dim());

        // Records 0*3+1 (speaker 0) and 2*3+1 (speaker 2) share content 1;
        // records 2 and 8 are the same speakers on content 2. At p=1 both
        // differences point along the same per-layer mixing column.
        let a = &corpus.records[1].matrix;
        let b = &corpus.records[7].matrix;
        let a2 = &corpus.records[2].matrix;
        let b2 = &corpus.records[8].matrix;
        for layer in 0..l {
            let diff: Vec<f64> = (0..d)
                .map(|i| (a[layer * d + i] - b[layer * d + i]) as f64)
                .collect();
            let dir: Vec<f64> = (0..d)
                .map(|i| (a2[layer * d + i] - b2[layer * d + i]) as f64)
                .collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-6, "degenerate difference in layer {layer}");
            let coeff = diff.iter().zip(&dir).map(|(x, y)| x * y).sum::<f64>()
                / dir.iter().map(|v| v * v).sum::<f64>();
            let residual: f64 = diff
                .iter()
                .zip(&dir)
                .map(|(x, y)| x - coeff * y)
                .map(|r| r * r)
                .sum::<f64>()
                .sqrt();
            // float32 storage bounds how exact this can be
            assert!(
                residual / norm < 1e-5,
                "layer {layer}: relative residual {} off the rank-1 direction",
                residual / norm
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = SyntheticConfig {
            n_speakers: 1,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(DataError::BadSyntheticConfig(_))
        ));
    }
}
