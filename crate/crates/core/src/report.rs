//! Serialization of results into report files.
//!
//! Field and column order is fixed by the record types below, and floats are
//! printed with the shortest round-trip representation, so emitting the same
//! results twice produces byte-identical files.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::clustering::{BaselineLabels, ClusterSet, GoalSummary, StabilityMatrix};
use crate::completion::{ClassificationReport, CompletionVerdict};
use crate::interaction::SftPair;
use crate::rtree::stats::csv_field;
use crate::rtree::TreeStats;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report: {0} is empty")]
    Empty(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Jsonl,
    Csv,
}

impl ReportFormat {
    fn ext(self) -> &'static str {
        match self {
            ReportFormat::Jsonl => "jsonl",
            ReportFormat::Csv => "csv",
        }
    }
}

/// Stability outcome of two clustering runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilitySummary {
    pub ari: f64,
    pub trace: u64,
    /// Best diagonal sum over all alignments, when small enough to search.
    pub best_trace: Option<u64>,
    pub total: u64,
    pub k_run_a: usize,
    pub k_run_b: usize,
}

pub enum Report<'a> {
    Clusters(&'a ClusterSet),
    Summaries(&'a [GoalSummary]),
    Verdicts(&'a [CompletionVerdict]),
    Classification(&'a ClassificationReport),
    TreeStats(&'a TreeStats),
    Stability {
        matrix: &'a StabilityMatrix,
        summary: &'a StabilitySummary,
    },
    Baseline(&'a BaselineLabels),
    Sft(&'a [SftPair]),
}

/// A report file: name relative to the output directory, and its contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedFile {
    pub name: String,
    pub contents: String,
}

#[derive(Serialize)]
struct ClusterRecord<'a> {
    cluster_id: usize,
    label: &'a str,
    size: usize,
    member_ids: Vec<&'a str>,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    source_id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct BaselineRecord<'a> {
    source_id: &'a str,
    labels: &'a [String],
}

fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("report record serializes"));
        out.push('\n');
    }
    out
}

fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let fields: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn file(name: impl Into<String>, contents: String) -> RenderedFile {
    RenderedFile {
        name: name.into(),
        contents,
    }
}

pub fn render_report(
    report: &Report<'_>,
    format: ReportFormat,
) -> Result<Vec<RenderedFile>, ReportError> {
    let ext = format.ext();
    Ok(match report {
        Report::Clusters(set) => {
            if set.clusters.is_empty() {
                return Err(ReportError::Empty("cluster set"));
            }
            let records = set.clusters.iter().map(|c| ClusterRecord {
                cluster_id: c.id,
                label: &c.label,
                size: c.member_ids.len(),
                member_ids: c.member_ids.iter().map(String::as_str).collect(),
            });
            let contents = match format {
                ReportFormat::Jsonl => jsonl(records),
                ReportFormat::Csv => csv(
                    &["cluster_id", "label", "size", "member_ids"],
                    records.map(|r| {
                        vec![
                            r.cluster_id.to_string(),
                            r.label.to_string(),
                            r.size.to_string(),
                            r.member_ids.join(";"),
                        ]
                    }),
                ),
            };
            vec![file(format!("clusters.{ext}"), contents)]
        }
        Report::Summaries(summaries) => {
            if summaries.is_empty() {
                return Err(ReportError::Empty("summary list"));
            }
            let records = summaries.iter().map(|s| SummaryRecord {
                source_id: &s.source_id,
                text: &s.text,
            });
            let contents = match format {
                ReportFormat::Jsonl => jsonl(records),
                ReportFormat::Csv => csv(
                    &["source_id", "text"],
                    records.map(|r| vec![r.source_id.to_string(), r.text.to_string()]),
                ),
            };
            vec![file(format!("summaries.{ext}"), contents)]
        }
        Report::Verdicts(verdicts) => {
            if verdicts.is_empty() {
                return Err(ReportError::Empty("verdict list"));
            }
            let contents = match format {
                ReportFormat::Jsonl => jsonl(verdicts.iter()),
                ReportFormat::Csv => csv(
                    &[
                        "source_id",
                        "predicted_complete",
                        "continuation",
                        "matched_pattern",
                        "strategy",
                    ],
                    verdicts.iter().map(|v| {
                        vec![
                            v.source_id.clone(),
                            v.predicted_complete.to_string(),
                            v.continuation.clone(),
                            v.matched_pattern.clone().unwrap_or_default(),
                            v.strategy.to_string(),
                        ]
                    }),
                ),
            };
            vec![file(format!("completion_verdicts.{ext}"), contents)]
        }
        Report::Classification(r) => {
            if r.total() == 0 {
                return Err(ReportError::Empty("confusion matrix"));
            }
            let contents = match format {
                ReportFormat::Jsonl => jsonl([r]),
                ReportFormat::Csv => csv(
                    &[
                        "accuracy",
                        "precision",
                        "recall",
                        "f1",
                        "tp",
                        "fp",
                        "fn",
                        "tn",
                        "flags",
                    ],
                    [vec![
                        r.accuracy.to_string(),
                        r.precision.to_string(),
                        r.recall.to_string(),
                        r.f1.to_string(),
                        r.tp.to_string(),
                        r.fp.to_string(),
                        r.fn_.to_string(),
                        r.tn.to_string(),
                        r.flags.join(";"),
                    ]],
                ),
            };
            vec![file(format!("completion_metrics.{ext}"), contents)]
        }
        Report::TreeStats(stats) => {
            if stats.records.is_empty() {
                return Err(ReportError::Empty("tree statistics"));
            }
            let aggregates = json!({
                "n_samples": stats.records.len(),
                "excluded": stats.excluded,
                "histograms": {
                    "leaf_count": stats.leaf_histogram,
                    "max_branch_logprob": stats.logprob_histogram,
                },
                "correlations": stats.correlations,
            });
            vec![
                file("rtree_stats.csv", stats.records_csv()),
                file("rtree_aggregates.json", pretty(&aggregates)),
            ]
        }
        Report::Stability { matrix, summary } => {
            if matrix.total() == 0 {
                return Err(ReportError::Empty("stability matrix"));
            }
            let mut value = serde_json::to_value(summary).expect("summary serializes");
            value["row_ids"] = json!(matrix.row_ids);
            value["col_ids"] = json!(matrix.col_ids);
            vec![
                file("stability_matrix.csv", matrix.to_csv()),
                file("stability.json", pretty(&value)),
            ]
        }
        Report::Baseline(labels) => {
            if labels.labels.is_empty() {
                return Err(ReportError::Empty("baseline labels"));
            }
            let contents = match format {
                ReportFormat::Jsonl => jsonl(labels.labels.iter().map(|(id, l)| BaselineRecord {
                    source_id: id,
                    labels: l,
                })),
                ReportFormat::Csv => csv(
                    &["source_id", "labels"],
                    labels
                        .labels
                        .iter()
                        .map(|(id, l)| vec![id.clone(), l.join(";")]),
                ),
            };
            let categories = json!({
                "categories": labels.categories,
                "sizes": labels.category_sizes(),
            });
            vec![
                file(format!("baseline_labels.{ext}"), contents),
                file("baseline_categories.json", pretty(&categories)),
            ]
        }
        Report::Sft(pairs) => {
            if pairs.is_empty() {
                return Err(ReportError::Empty("SFT pair list"));
            }
            let contents = match format {
                ReportFormat::Jsonl => jsonl(pairs.iter()),
                ReportFormat::Csv => csv(
                    &["input", "target", "source_id"],
                    pairs
                        .iter()
                        .map(|p| vec![p.input.clone(), p.target.clone(), p.source_id.clone()]),
                ),
            };
            vec![file(format!("sft_pairs.{ext}"), contents)]
        }
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

/// Renders `report` and writes its files into `dir`.
pub fn emit_report(
    report: &Report<'_>,
    dir: &Path,
    format: ReportFormat,
) -> Result<Vec<PathBuf>, ReportError> {
    let files = render_report(report, format)?;
    let mut paths = Vec::with_capacity(files.len());
    for f in files {
        let path = dir.join(&f.name);
        write_atomic(&path, f.contents.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_single_record() {
        let r = ClassificationReport::from_counts(3, 1, 2, 4);
        let files = render_report(&Report::Classification(&r), ReportFormat::Jsonl).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].contents.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(&files[0].contents).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 9);
        let csv = render_report(&Report::Classification(&r), ReportFormat::Csv).unwrap();
        assert!(csv[0]
            .contents
            .starts_with("accuracy,precision,recall,f1,tp,fp,fn,tn,flags\n0.7,0.75,0.6,"));
    }

    #[test]
    fn empty_results_rejected() {
        assert!(matches!(
            render_report(&Report::Verdicts(&[]), ReportFormat::Jsonl),
            Err(ReportError::Empty(_))
        ));
        assert!(
            render_report(&Report::Clusters(&ClusterSet::default()), ReportFormat::Csv).is_err()
        );
    }

    #[test]
    fn emit_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let r = ClassificationReport::from_counts(1, 2, 3, 4);
        let p = emit_report(&Report::Classification(&r), dir.path(), ReportFormat::Jsonl).unwrap();
        let first = std::fs::read(&p[0]).unwrap();
        emit_report(&Report::Classification(&r), dir.path(), ReportFormat::Jsonl).unwrap();
        assert_eq!(first, std::fs::read(&p[0]).unwrap());
    }
}
