//! Running one experiment: produce each arm's corpus once, then train and
//! evaluate every task probe on splits shared across arms.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{laplace_anonymize_corpus, LaplaceConfig};
use crate::datamodel::{generate_synthetic, read_corpus, read_manifest, Corpus, Manifest};
use crate::probes::{content_labels, run_probe_task, speaker_labels, Labels, Metrics};
use crate::transformer;

use super::config::{ArmSpec, ExperimentConfig, HarnessError, Seeds, TaskSource, TaskSpec};
use super::rss::peak_rss_bytes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Seeds,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub l: u32,
    pub d: u32,
    pub n_speakers: usize,
    pub n_records: usize,
}

/// One task column of the report grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskColumn {
    pub name: String,
    /// Identification-attack columns are annotated lower-is-better.
    pub lower_is_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TaskReport {
    Ok { metrics: Metrics },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    /// Wall time of the anonymization pass alone (probe training excluded).
    pub anonymize_seconds: f64,
    /// Process peak RSS observed after the pass; 0 when unavailable.
    pub peak_rss_bytes: u64,
    /// Set when the arm aborted before any task could run.
    pub error: Option<String>,
    pub tasks: BTreeMap<String, TaskReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub corpus: CorpusInfo,
    pub columns: Vec<TaskColumn>,
    pub arms: Vec<ArmReport>,
}

/// Loads (or generates) the corpus named by the config, with its manifest
/// when one sits next to the file.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<(Corpus, Option<Manifest>), HarnessError> {
    if let Some(path) = &cfg.corpus.path {
        let corpus = read_corpus(path)?;
        let manifest = read_manifest(crate::datamodel::manifest_path(path))?;
        Ok((corpus, manifest))
    } else {
        let synth = cfg.corpus.synthetic.as_ref().expect("validated config");
        Ok((generate_synthetic(synth)?, None))
    }
}

fn task_labels(
    task: &TaskSpec,
    corpus: &Corpus,
    manifest: Option<&Manifest>,
) -> Result<Labels, HarnessError> {
    match &task.source {
        TaskSource::Speaker => Ok(speaker_labels(corpus)),
        TaskSource::ContentMod(k) => {
            if *k == 0 {
                return Err(HarnessError::Config(format!(
                    "task {:?}: content_mod must be positive",
                    task.name
                )));
            }
            Ok(content_labels(corpus, *k))
        }
        TaskSource::Manifest(key) => {
            let manifest = manifest.ok_or_else(|| {
                HarnessError::Config(format!(
                    "task {:?} needs a manifest sidecar, but none was found",
                    task.name
                ))
            })?;
            manifest.label_maps.get(key).cloned().ok_or_else(|| {
                HarnessError::Config(format!(
                    "task {:?}: manifest has no label map {key:?}",
                    task.name
                ))
            })
        }
    }
}

/// Produces the arm's (possibly anonymized) corpus. The returned seconds
/// cover exactly this pass.
pub fn run_arm(arm: &ArmSpec, corpus: &Corpus, seeds: &Seeds) -> Result<(Corpus, f64), HarnessError> {
    let start = Instant::now();
    let out = match arm {
        ArmSpec::Original => corpus.clone(),
        ArmSpec::Laplace { epsilon } => {
            laplace_anonymize_corpus(corpus, &LaplaceConfig::new(*epsilon, seeds.anonymize))?
        }
        ArmSpec::PrivacyTransformer { checkpoint } => {
            let model = transformer::load(checkpoint)?;
            model.anonymize_corpus(corpus, seeds.anonymize)?
        }
    };
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Runs every arm and task. A failing arm or task is recorded in the report
/// with its cause; the rest of the experiment continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let (corpus, manifest) = load_corpus(cfg)?;

    let mut labels_per_task: Vec<(String, Labels)> = Vec::with_capacity(cfg.tasks.len());
    for task in &cfg.tasks {
        labels_per_task.push((task.name.clone(), task_labels(task, &corpus, manifest.as_ref())?));
    }

    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.split_seed = cfg.seeds.split;
    probe_cfg.seed = cfg.seeds.probe;

    let columns: Vec<TaskColumn> = cfg
        .tasks
        .iter()
        .map(|t| TaskColumn {
            name: t.name.clone(),
            lower_is_better: t.source == TaskSource::Speaker,
        })
        .collect();

    let mut arms = Vec::with_capacity(cfg.arms.len());
    for arm in &cfg.arms {
        let name = arm.label();
        log::info!("arm {name}: anonymizing {} records", corpus.records.len());
        let mut report = ArmReport {
            name,
            anonymize_seconds: 0.0,
            peak_rss_bytes: 0,
            error: None,
            tasks: BTreeMap::new(),
        };
        match run_arm(arm, &corpus, &cfg.seeds) {
            Err(e) => {
                report.error = Some(e.to_string());
            }
            Ok((anonymized, seconds)) => {
                report.anonymize_seconds = seconds;
                report.peak_rss_bytes = peak_rss_bytes();
                for (task_name, labels) in &labels_per_task {
                    log::info!("arm {}: probing task {task_name}", report.name);
                    let entry = match run_probe_task(&anonymized, labels, &probe_cfg) {
                        Ok(outcome) => TaskReport::Ok {
                            metrics: outcome.metrics,
                        },
                        Err(e) => TaskReport::Failed {
                            error: e.to_string(),
                        },
                    };
                    report.tasks.insert(task_name.clone(), entry);
                }
            }
        }
        arms.push(report);
    }

    Ok(ExperimentReport {
        provenance: Provenance {
            config_hash: cfg.content_hash(),
            seeds: cfg.seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        corpus: CorpusInfo {
            l: corpus.l,
            d: corpus.d,
            n_speakers: corpus.speakers.len(),
            n_records: corpus.records.len(),
        },
        columns,
        arms,
    })
}

impl ExperimentReport {
    /// Equality that ignores wall-time and memory fields, for determinism
    /// checks.
    pub fn same_results(&self, other: &ExperimentReport) -> bool {
        if self.provenance != other.provenance
            || self.corpus != other.corpus
            || self.columns != other.columns
            || self.arms.len() != other.arms.len()
        {
            return false;
        }
        self.arms.iter().zip(&other.arms).all(|(a, b)| {
            a.name == b.name && a.error == b.error && a.tasks == b.tasks
        })
    }
}
