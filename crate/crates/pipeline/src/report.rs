//! Stage-by-metric tables over one or more run manifests.

use std::fmt::Write as _;
use std::str::FromStr;

use ptqlora_core::eval::MetricReport;
use ptqlora_core::StageLabel;

use crate::error::{PipelineError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
}

impl FromStr for ReportFormat {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "table" | "text" => Ok(Self::Table),
            _ => Err(PipelineError::Config(format!(
                "unknown report format `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub stage: StageLabel,
    /// Number of stage records averaged into this row.
    pub runs: usize,
    pub values: Vec<f64>,
    pub best: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    /// `task/metric` names.
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn column_values(r: &MetricReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut tasks: Vec<_> = r.tasks.iter().collect();
    tasks.sort_by(|a, b| a.task.cmp(&b.task));
    for t in tasks {
        for (k, v) in t.columns() {
            out.push((format!("{}/{k}", t.task), v));
        }
    }
    out
}

/// One row per stage present (pipeline order), each metric averaged over the
/// manifests that contain the stage. The best value of each column is marked;
/// ties go to the earlier row.
pub fn build_report(manifests: &[RunManifest]) -> Result<ReportTable> {
    if manifests.is_empty() {
        return Err(PipelineError::Report("no manifests given".into()));
    }
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for label in StageLabel::ALL {
        let reports: Vec<&MetricReport> = manifests
            .iter()
            .filter_map(|m| m.stage(label))
            .map(|s| &s.metrics)
            .collect();
        if reports.is_empty() {
            continue;
        }
        let mut sums: Vec<f64> = Vec::new();
        for r in &reports {
            let cols = column_values(r);
            let names: Vec<String> = cols.iter().map(|(n, _)| n.clone()).collect();
            match &columns {
                None => {
                    columns = Some(names);
                }
                Some(c) if *c != names => {
                    return Err(PipelineError::Report(format!(
                        "inconsistent metric sets: {label} has [{}], expected [{}]",
                        names.join(", "),
                        c.join(", ")
                    )));
                }
                Some(_) => {}
            }
            if sums.is_empty() {
                sums = vec![0.0; cols.len()];
            }
            for (s, (_, v)) in sums.iter_mut().zip(&cols) {
                *s += v;
            }
        }
        let n = reports.len() as f64;
        rows.push(ReportRow {
            stage: label,
            runs: reports.len(),
            values: sums.iter().map(|s| s / n).collect(),
            best: Vec::new(),
        });
    }
    let columns = columns.unwrap_or_default();
    for c in 0..columns.len() {
        let mut best: Option<usize> = None;
        for (i, r) in rows.iter().enumerate() {
            let v = r.values[c];
            if v.is_nan() {
                continue;
            }
            if best.is_none_or(|b| v > rows[b].values[c]) {
                best = Some(i);
            }
        }
        for (i, r) in rows.iter_mut().enumerate() {
            r.best.push(best == Some(i));
        }
    }
    Ok(ReportTable { columns, rows })
}

impl ReportTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["stage".to_string(), "runs".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("best".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.stage.to_string(), r.runs.to_string()];
            rec.extend(r.values.iter().map(|v| format!("{v:.4}")));
            let best: Vec<&str> = self
                .columns
                .iter()
                .zip(&r.best)
                .filter(|(_, b)| **b)
                .map(|(c, _)| c.as_str())
                .collect();
            rec.push(best.join(";"));
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| PipelineError::Report(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Aligned text; `*` marks the best value in each column.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["stage".to_string(), "runs".to_string()];
        header.extend(self.columns.iter().cloned());
        cells.push(header);
        for r in &self.rows {
            let mut line = vec![r.stage.to_string(), r.runs.to_string()];
            for (v, b) in r.values.iter().zip(&r.best) {
                line.push(format!("{v:.4}{}", if *b { "*" } else { " " }));
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| {
                cells
                    .iter()
                    .map(|l| l[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (i, line) in cells.iter().enumerate() {
            let parts: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    if c == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).expect("write to string");
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                writeln!(out, "{}", "-".repeat(total)).expect("write to string");
            }
        }
        out
    }
}

pub fn emit_report(manifests: &[RunManifest], format: ReportFormat) -> Result<String> {
    let t = build_report(manifests)?;
    match format {
        ReportFormat::Csv => t.to_csv(),
        ReportFormat::Table => Ok(t.to_text()),
    }
}
