//! Experiment configuration (TOML, with a JSON fallback) and the harness
//! error type.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::datamodel::{DataError, SyntheticConfig};
use crate::probes::{ProbeConfig, ProbeError};
use crate::transformer::ModelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True for malformed or incompatible inputs (CLI exit code 2), as
    /// opposed to runtime/environment failures (exit code 3).
    pub fn is_data_error(&self) -> bool {
        match self {
            HarnessError::Config(_) | HarnessError::Parse(_) => true,
            HarnessError::Data(e) => !matches!(e, DataError::Io(_)),
            HarnessError::Model(e) => !matches!(e, ModelError::Io(_)),
            HarnessError::Baseline(_) => true,
            HarnessError::Probe(e) => !matches!(e, ProbeError::Data(DataError::Io(_))),
            HarnessError::Io(_) => false,
            HarnessError::Json(_) => true,
        }
    }
}

/// Where the evaluation corpus comes from: a `.pemb` file or the synthetic
/// generator. Exactly one must be set.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

/// One anonymization arm of the comparison.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArmSpec {
    /// Unmodified embeddings.
    Original,
    /// Element-wise clipping plus Laplace(2/epsilon) noise.
    Laplace { epsilon: f64 },
    /// A trained privacy transformer checkpoint.
    PrivacyTransformer { checkpoint: PathBuf },
}

impl ArmSpec {
    pub fn label(&self) -> String {
        match self {
            ArmSpec::Original => "original".into(),
            ArmSpec::Laplace { epsilon } => format!("laplace(eps={epsilon})"),
            ArmSpec::PrivacyTransformer { .. } => "privacy_transformer".into(),
        }
    }
}

/// Label source of a probe task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    /// Record speaker ids: the identification attack, lower is better.
    Speaker,
    /// `content_id mod k`.
    ContentMod(u32),
    /// A named label map from the corpus manifest sidecar.
    Manifest(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub source: TaskSource,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Probe train/test split, shared by every arm.
    pub split: u64,
    /// Probe initialization and batching.
    pub probe: u64,
    /// Target-speaker draws and Laplace noise.
    pub anonymize: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            split: 7,
            probe: 11,
            anonymize: 13,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub arms: Vec<ArmSpec>,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        match (&self.corpus.path, &self.corpus.synthetic) {
            (Some(_), Some(_)) => return fail("corpus: set either path or synthetic, not both".into()),
            (None, None) => return fail("corpus: set path or synthetic".into()),
            _ => {}
        }
        if self.arms.is_empty() {
            return fail("at least one arm is required".into());
        }
        if self.tasks.is_empty() {
            return fail("at least one task is required".into());
        }
        if !self.tasks.iter().any(|t| t.source == TaskSource::Speaker) {
            return fail("a speaker-identification task (source = \"speaker\") is required".into());
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.tasks.len() {
            return fail("task names must be unique".into());
        }
        for arm in &self.arms {
            if let ArmSpec::Laplace { epsilon } = arm {
                if !(epsilon.is_finite() && *epsilon > 0.0) {
                    return fail(format!("laplace arm: epsilon {epsilon} must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Parses TOML unless the extension says JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// FNV-1a hash of the canonical JSON form, for provenance.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}
