//! Downstream probe classifiers: the utility tasks and the
//! speaker-identification attack, plus metric computation.

pub mod metrics;
pub mod model;
pub mod train;

pub use metrics::{compute_metrics, metrics_from_confusion, ClassMetrics, Metrics};
pub use model::{ProbeConfig, ProbeError, ProbeModel};
pub use train::{
    content_labels, evaluate, run_probe_task, sid_attack, speaker_labels, train_probe, Labels,
    TaskOutcome,
};
