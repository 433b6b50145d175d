//! Experiment orchestration, reporting, and efficiency benchmarking.

pub mod bench;
pub mod config;
pub mod experiment;
pub mod report;
pub mod rss;

pub use bench::{bench, BenchResult, BenchTarget};
pub use config::{ArmSpec, CorpusSpec, ExperimentConfig, HarnessError, Seeds, TaskSource, TaskSpec};
pub use experiment::{
    load_corpus, run_arm, run_experiment, ArmReport, CorpusInfo, ExperimentReport, Provenance,
    TaskColumn, TaskReport,
};
pub use report::{emit_report, render, render_csv, render_markdown, ReportFormat};
pub use rss::peak_rss_bytes;
