//! Model × dataset score grids and their JSON form.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vuldetect_core::metrics::EvalReport;

use crate::error::{Error, Result};
use crate::io::canonical_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedReport {
    pub model: String,
    pub dataset: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            other => Err(Error::Usage(format!("unknown format {other:?}; expected text or json"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Text => "txt",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }

    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            Metric::Accuracy => r.accuracy,
            Metric::Precision => r.precision,
            Metric::Recall => r.recall,
            Metric::F1 => r.f1,
        }
    }
}

fn check_names(reports: &[NamedReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Usage("no reports to render".into()));
    }
    let mut seen = BTreeSet::new();
    for r in reports {
        if !seen.insert((r.model.as_str(), r.dataset.as_str())) {
            return Err(Error::Usage(format!(
                "two reports for model {:?} on dataset {:?}",
                r.model, r.dataset
            )));
        }
    }
    Ok(())
}

fn first_seen<'a>(names: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for n in names {
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// One metric as a grid: models down, datasets across, scores in percent
/// with two decimals, `-` where a pair was not evaluated. Rows and columns
/// follow first appearance.
pub fn metric_grid(reports: &[NamedReport], metric: Metric) -> Result<String> {
    check_names(reports)?;
    let models = first_seen(reports.iter().map(|r| r.model.as_str()));
    let datasets = first_seen(reports.iter().map(|r| r.dataset.as_str()));
    let cell = |m: &str, d: &str| {
        reports
            .iter()
            .find(|r| r.model == m && r.dataset == d)
            .map_or_else(|| "-".to_string(), |r| format!("{:.2}", 100.0 * metric.of(&r.report)))
    };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once(metric.name().to_string())
        .chain(datasets.iter().map(|d| d.to_string()))
        .collect()];
    for m in &models {
        rows.push(
            std::iter::once(m.to_string())
                .chain(datasets.iter().map(|d| cell(m, d)))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..=datasets.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, text) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{text:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {text:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// Text: one grid per metric, separated by blank lines. JSON: the canonical
/// array of named reports.
pub fn render_report(reports: &[NamedReport], format: Format) -> Result<String> {
    check_names(reports)?;
    match format {
        Format::Text => {
            let grids = Metric::ALL
                .iter()
                .map(|&m| metric_grid(reports, m))
                .collect::<Result<Vec<_>>>()?;
            Ok(grids.join("\n"))
        }
        Format::Json => Ok(canonical_json(&reports)? + "\n"),
    }
}

pub fn parse_json_report(text: &str) -> Result<Vec<NamedReport>> {
    serde_json::from_str(text).map_err(|e| Error::Usage(format!("invalid report JSON: {e}")))
}
