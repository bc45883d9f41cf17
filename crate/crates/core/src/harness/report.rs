//! Accuracy tables in the layout of one row per strategy, one column per
//! dataset, with the best and second-best entry of each column marked.
//!
//! Accuracies are stored as integer tenths of a percent, so `84.1%` is `841`.
//! Counts round half away from zero. Markers compare these stored values:
//! every entry equal to the column maximum is best, and every entry equal to
//! the largest value below it is second best.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ReportFormat;
use crate::confidence::TrainConfig;
use crate::ensemble::Strategy;
use crate::features::SplitSpec;

/// `correct / total` as tenths of a percent, rounded half away from zero.
pub fn tenths_from_counts(correct: usize, total: usize) -> u32 {
    assert!(
        total > 0 && correct <= total,
        "invalid counts {correct}/{total}"
    );
    let (c, t) = (correct as u64, total as u64);
    ((2000 * c + t) / (2 * t)) as u32
}

fn tenths_from_percent(percent: f64) -> u32 {
    assert!(
        (0.0..=100.0).contains(&percent),
        "percentage {percent} out of range"
    );
    (percent * 10.0).round() as u32
}

fn format_tenths(tenths: u32) -> String {
    format!("{}.{}", tenths / 10, tenths % 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub strategy: Strategy,
    pub accuracy_tenths: u32,
    /// Absent for tables transcribed from published numbers.
    pub correct: Option<usize>,
    pub total: Option<usize>,
    pub tie_broken: Option<usize>,
}

impl ReportCell {
    pub fn percent(&self) -> f64 {
        f64::from(self.accuracy_tenths) / 10.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub model_id: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Absent when the predictor was loaded rather than trained in this run.
    pub best_val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    pub correct: usize,
    pub total: usize,
}

/// Every strategy's answer on one test example, aligned with the report's
/// strategy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleDecisions {
    pub example_id: String,
    pub gold: usize,
    pub chosen: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDetails {
    pub dataset_id: String,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub predictors: Vec<PredictorSummary>,
    pub single_models: Vec<ModelScore>,
    pub decisions: Vec<ExampleDecisions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub dataset: String,
    pub cells: Vec<ReportCell>,
    pub details: Option<DatasetDetails>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub split: Option<SplitSpec>,
    pub train: Option<TrainConfig>,
    pub shuffle_algorithm: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Marker {
    Best,
    Second,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub strategies: Vec<Strategy>,
    pub columns: Vec<ReportColumn>,
    pub metadata: ReportMetadata,
}

impl EnsembleReport {
    /// A report from already-rounded percentages, e.g. a published table.
    ///
    /// `rows[s][d]` is the accuracy of `strategies[s]` on `datasets[d]`.
    pub fn from_percentages(datasets: &[&str], strategies: &[Strategy], rows: &[&[f64]]) -> Self {
        assert_eq!(strategies.len(), rows.len(), "one row per strategy");
        let columns = datasets
            .iter()
            .enumerate()
            .map(|(d, name)| ReportColumn {
                dataset: name.to_string(),
                cells: strategies
                    .iter()
                    .zip(rows)
                    .map(|(&strategy, row)| ReportCell {
                        strategy,
                        accuracy_tenths: tenths_from_percent(row[d]),
                        correct: None,
                        total: None,
                        tie_broken: None,
                    })
                    .collect(),
                details: None,
            })
            .collect();
        Self {
            strategies: strategies.to_vec(),
            columns,
            metadata: ReportMetadata {
                split: None,
                train: None,
                shuffle_algorithm: crate::rng::SHUFFLE_ALGORITHM.to_string(),
            },
        }
    }

    pub fn column(&self, dataset: &str) -> Option<&ReportColumn> {
        self.columns.iter().find(|c| c.dataset == dataset)
    }

    pub fn cell(&self, dataset: &str, strategy: Strategy) -> Option<&ReportCell> {
        self.column(dataset)?
            .cells
            .iter()
            .find(|c| c.strategy == strategy)
    }

    /// Best/second markers for each column, aligned with that column's cells.
    pub fn markers(&self) -> Vec<Vec<Marker>> {
        self.columns
            .iter()
            .map(|c| column_markers(&c.cells))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn column_markers(cells: &[ReportCell]) -> Vec<Marker> {
    let best = cells.iter().map(|c| c.accuracy_tenths).max();
    let second = cells
        .iter()
        .map(|c| c.accuracy_tenths)
        .filter(|&v| Some(v) != best)
        .max();
    cells
        .iter()
        .map(|c| match Some(c.accuracy_tenths) {
            v if v == best => Marker::Best,
            v if v == second => Marker::Second,
            _ => Marker::None,
        })
        .collect()
}

fn decorate(value: &str, marker: Marker, format: ReportFormat) -> String {
    match (format, marker) {
        (ReportFormat::Markdown, Marker::Best) => format!("**{value}**"),
        (ReportFormat::Markdown, Marker::Second) => format!("_{value}_"),
        (ReportFormat::Text, Marker::Best) => format!("{value}*"),
        (ReportFormat::Text, Marker::Second) => format!("{value}+"),
        (_, Marker::None) => value.to_string(),
    }
}

/// Renders the accuracy table.
///
/// Markdown marks best as `**x**` and second best as `_x_`. Text marks them
/// with a `*` or `+` suffix and ends with a legend line.
pub fn render_table(report: &EnsembleReport, format: ReportFormat) -> String {
    let markers = report.markers();
    let header: Vec<String> = std::iter::once("Method".to_string())
        .chain(report.columns.iter().map(|c| c.dataset.clone()))
        .collect();
    let rows: Vec<Vec<String>> = report
        .strategies
        .iter()
        .map(|&strategy| {
            let mut row = vec![strategy.display_name().to_string()];
            for (col, marks) in report.columns.iter().zip(&markers) {
                let cell = col
                    .cells
                    .iter()
                    .position(|c| c.strategy == strategy)
                    .map(|i| {
                        decorate(
                            &format_tenths(col.cells[i].accuracy_tenths),
                            marks[i],
                            format,
                        )
                    })
                    .unwrap_or_else(|| "-".to_string());
                row.push(cell);
            }
            row
        })
        .collect();

    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            writeln!(out, "| {} |", header.join(" | ")).unwrap();
            let rule: Vec<&str> = header.iter().map(|_| "---").collect();
            writeln!(out, "|{}|", rule.join("|")).unwrap();
            for row in &rows {
                writeln!(out, "| {} |", row.join(" | ")).unwrap();
            }
        }
        ReportFormat::Text => {
            let widths: Vec<usize> = (0..header.len())
                .map(|i| {
                    rows.iter()
                        .map(|r| r[i].len())
                        .chain([header[i].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[String]| {
                cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| {
                        if i == 0 {
                            format!("{c:<w$}")
                        } else {
                            format!("{c:>w$}")
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            writeln!(out, "{}", line(&header).trim_end()).unwrap();
            for row in &rows {
                writeln!(out, "{}", line(row).trim_end()).unwrap();
            }
            writeln!(out, "(accuracy %; * best, + second best)").unwrap();
        }
    }
    out
}
