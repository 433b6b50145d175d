//! Report rendering: lossless JSON, a comparison-grid markdown view, and a
//! long-form CSV.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::config::HarnessError;
use super::experiment::{ExperimentReport, TaskReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?} (json|markdown|csv)")),
        }
    }
}

pub fn render(report: &ExperimentReport, format: ReportFormat) -> Result<String, HarnessError> {
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
    })
}

pub fn emit_report(
    report: &ExperimentReport,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<(), HarnessError> {
    std::fs::write(path, render(report, format)?)?;
    Ok(())
}

/// A Table-1-style grid (accuracy / macro-F1 in percent) plus an efficiency
/// table. Pure function of the report, so re-rendering saved JSON
/// reproduces it byte for byte.
pub fn render_markdown(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Privacy/utility report");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "- Corpus: L={}, d={}, {} speakers, {} records",
        report.corpus.l, report.corpus.d, report.corpus.n_speakers, report.corpus.n_records
    );
    let _ = writeln!(
        out,
        "- Provenance: config `{}`, seeds split={} probe={} anonymize={}, version {}",
        report.provenance.config_hash,
        report.provenance.seeds.split,
        report.provenance.seeds.probe,
        report.provenance.seeds.anonymize,
        report.provenance.version
    );
    let _ = writeln!(out);

    // header: SID columns carry the lower-is-better arrow and only report
    // accuracy; utility columns report accuracy and macro-F1.
    let mut header = String::from("| Arm |");
    let mut rule = String::from("|---|");
    for col in &report.columns {
        if col.lower_is_better {
            let _ = write!(header, " {} Acc. ↓ |", col.name.to_uppercase());
            rule.push_str("---|");
        } else {
            let _ = write!(header, " {} Acc. | {} F1 |", col.name, col.name);
            rule.push_str("---|---|");
        }
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{rule}");

    let mut failures: Vec<String> = Vec::new();
    for arm in &report.arms {
        let mut row = format!("| {} |", arm.name);
        if let Some(err) = &arm.error {
            failures.push(format!("arm {}: {err}", arm.name));
        }
        for col in &report.columns {
            let cell = match arm.tasks.get(&col.name) {
                Some(TaskReport::Ok { metrics }) => {
                    if col.lower_is_better {
                        format!(" {:.2} |", 100.0 * metrics.accuracy)
                    } else {
                        format!(
                            " {:.2} | {:.2} |",
                            100.0 * metrics.accuracy,
                            100.0 * metrics.macro_f1
                        )
                    }
                }
                Some(TaskReport::Failed { error }) => {
                    failures.push(format!("arm {}, task {}: {error}", arm.name, col.name));
                    if col.lower_is_better {
                        " — |".to_string()
                    } else {
                        " — | — |".to_string()
                    }
                }
                None => {
                    if col.lower_is_better {
                        " — |".to_string()
                    } else {
                        " — | — |".to_string()
                    }
                }
            };
            row.push_str(&cell);
        }
        let _ = writeln!(out, "{row}");
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "## Efficiency");
    let _ = writeln!(out);
    let _ = writeln!(out, "| Arm | Anonymize (s) | Peak memory (GB) |");
    let _ = writeln!(out, "|---|---|---|");
    for arm in &report.arms {
        let _ = writeln!(
            out,
            "| {} | {:.3} | {:.2} |",
            arm.name,
            arm.anonymize_seconds,
            arm.peak_rss_bytes as f64 / 1e9
        );
    }

    if !failures.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "## Failures");
        let _ = writeln!(out);
        for f in failures {
            let _ = writeln!(out, "- {f}");
        }
    }
    out
}

/// One row per (arm, task, metric); accuracy and macro-F1 per task.
pub fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("arm,task,metric,value\n");
    for arm in &report.arms {
        for col in &report.columns {
            if let Some(TaskReport::Ok { metrics }) = arm.tasks.get(&col.name) {
                let _ = writeln!(out, "{},{},accuracy,{}", arm.name, col.name, metrics.accuracy);
                let _ = writeln!(out, "{},{},macro_f1,{}", arm.name, col.name, metrics.macro_f1);
            }
        }
    }
    out
}
