//! Report cells, their delimited and tabular forms, and run comparison.

use super::HarnessError;
use crate::metrics::{aggregate, EvalRecord, GroupBy, Percent};
use crate::types::{GranularityLevel, RetrievalMode};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

/// Cell identity. Ordered by encoder, granularity, mode, metric.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReportKey {
    pub encoder: String,
    pub granularity: GranularityLevel,
    pub mode: RetrievalMode,
    pub metric: String,
}

impl std::fmt::Display for ReportKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/{}", self.encoder, self.granularity.as_str(), self.mode.as_str(), self.metric)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportCell {
    pub key: ReportKey,
    pub value: Percent,
    /// `value` minus the baseline cell's value; absent for baseline cells
    /// and when no baseline ran.
    pub delta_vs_baseline: Option<Percent>,
    pub queries: usize,
}

pub fn multi_recall_name(k: usize) -> String {
    format!("multi_recall@{k}")
}

pub fn recall_name(k: usize) -> String {
    format!("recall@{k}")
}

/// Two cells (Multi-recall@K, Recall@K) per (encoder, granularity, mode)
/// group present in `records`, in key order.
pub fn report_cells(records: &[EvalRecord], k: usize) -> Vec<ReportCell> {
    let agg = aggregate(records, GroupBy::ALL, &[]);
    let mut values: BTreeMap<ReportKey, (Percent, usize)> = BTreeMap::new();
    for row in agg.rows {
        let (Some(encoder), Some(granularity), Some(mode)) = (row.key.encoder, row.key.granularity, row.key.mode) else {
            continue;
        };
        for (metric, v) in [(multi_recall_name(k), row.multi_recall), (recall_name(k), row.recall)] {
            values.insert(ReportKey { encoder: encoder.clone(), granularity, mode, metric }, (v, row.count));
        }
    }
    values
        .iter()
        .map(|(key, &(value, queries))| {
            let delta = (key.mode != RetrievalMode::Baseline)
                .then(|| values.get(&ReportKey { mode: RetrievalMode::Baseline, ..key.clone() }))
                .flatten()
                .map(|(base, _)| value - *base);
            ReportCell { key: key.clone(), value, delta_vs_baseline: delta, queries }
        })
        .collect()
}

const HEADER: [&str; 7] = ["encoder", "granularity", "mode", "metric", "value", "delta_vs_baseline", "queries"];

pub fn write_report_csv(path: &Path, cells: &[ReportCell]) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Report { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(HEADER).map_err(err)?;
    for c in cells {
        w.write_record([
            c.key.encoder.clone(),
            c.key.granularity.as_str().to_string(),
            c.key.mode.as_str().to_string(),
            c.key.metric.clone(),
            c.value.to_string(),
            c.delta_vs_baseline.map(|d| d.to_string()).unwrap_or_default(),
            c.queries.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportCell>, HarnessError> {
    let bad = |message: String| HarnessError::Report { path: path.to_path_buf(), message };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let at = |m: String| bad(format!("row {}: {m}", i + 2));
        let delta = match &row[5] {
            "" => None,
            d => Some(d.parse::<Percent>().map_err(at)?),
        };
        out.push(ReportCell {
            key: ReportKey {
                encoder: row[0].to_string(),
                granularity: row[1].parse().map_err(|e: crate::types::UnknownLabel| at(e.to_string()))?,
                mode: row[2].parse().map_err(|e: crate::types::UnknownLabel| at(e.to_string()))?,
                metric: row[3].to_string(),
            },
            value: row[4].parse().map_err(at)?,
            delta_vs_baseline: delta,
            queries: row[6].parse().map_err(|e: std::num::ParseIntError| at(e.to_string()))?,
        });
    }
    Ok(out)
}

fn arrow(d: Percent) -> String {
    match d.0.signum() {
        1 => format!("↑{d}"),
        -1 => format!("↓{}", Percent(-d.0)),
        _ => format!("={d}"),
    }
}

fn table(out: &mut String, header: Vec<String>, rows: Vec<Vec<String>>) {
    let widths: Vec<usize> =
        (0..header.len()).map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0)).collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        padded.join("  ").trim_end().to_string()
    };
    writeln!(out, "{}", line(&header)).unwrap();
    for r in &rows {
        writeln!(out, "{}", line(r)).unwrap();
    }
}

/// Mode × granularity tables, one per (metric, encoder). Enhanced cells show
/// their change against baseline with an arrow.
pub fn render_tables(
    cells: &[ReportCell],
    failed: &BTreeSet<(String, GranularityLevel, RetrievalMode)>,
    granularities: &[GranularityLevel],
    modes: &[RetrievalMode],
) -> String {
    let by_key: BTreeMap<&ReportKey, &ReportCell> = cells.iter().map(|c| (&c.key, c)).collect();
    let metrics: BTreeSet<&str> = cells.iter().map(|c| c.key.metric.as_str()).collect();
    let mut encoders: BTreeSet<&str> = cells.iter().map(|c| c.key.encoder.as_str()).collect();
    encoders.extend(failed.iter().map(|f| f.0.as_str()));
    let mut grans = granularities.to_vec();
    grans.sort();
    grans.dedup();
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();

    let mut out = String::new();
    for metric in &metrics {
        for enc in &encoders {
            writeln!(out, "{metric} (%), encoder {enc}").unwrap();
            let mut header = vec!["mode".to_string()];
            header.extend(grans.iter().map(|g| g.title().to_string()));
            let rows = modes
                .iter()
                .map(|&mode| {
                    let mut row = vec![mode.as_str().to_string()];
                    for &g in &grans {
                        let key = ReportKey { encoder: enc.to_string(), granularity: g, mode, metric: metric.to_string() };
                        row.push(match by_key.get(&key) {
                            Some(c) => match c.delta_vs_baseline {
                                Some(d) => format!("{} {}", c.value, arrow(d)),
                                None => c.value.to_string(),
                            },
                            None if failed.contains(&(enc.to_string(), g, mode)) => "failed".into(),
                            None => "-".into(),
                        });
                    }
                    row
                })
                .collect();
            table(&mut out, header, rows);
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaRow {
    pub key: ReportKey,
    pub a: Percent,
    pub b: Percent,
    pub delta: Percent,
}

/// Per-cell `b - a`. Both reports must contain exactly the same cells.
pub fn compare_runs(a: &[ReportCell], b: &[ReportCell]) -> Result<Vec<DeltaRow>, HarnessError> {
    let ma: BTreeMap<&ReportKey, Percent> = a.iter().map(|c| (&c.key, c.value)).collect();
    let mb: BTreeMap<&ReportKey, Percent> = b.iter().map(|c| (&c.key, c.value)).collect();
    if let Some(k) = ma.keys().find(|k| !mb.contains_key(*k)) {
        return Err(HarnessError::Mismatch(format!("cell {k} is missing from the second report")));
    }
    if let Some(k) = mb.keys().find(|k| !ma.contains_key(*k)) {
        return Err(HarnessError::Mismatch(format!("cell {k} is missing from the first report")));
    }
    Ok(ma.into_iter().map(|(k, va)| DeltaRow { key: k.clone(), a: va, b: mb[k], delta: mb[k] - va }).collect())
}

pub fn render_comparison(rows: &[DeltaRow]) -> String {
    let header = ["encoder", "granularity", "mode", "metric", "a", "b", "delta"].map(String::from).to_vec();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.key.encoder.clone(),
                r.key.granularity.as_str().to_string(),
                r.key.mode.as_str().to_string(),
                r.key.metric.clone(),
                r.a.to_string(),
                r.b.to_string(),
                arrow(r.delta),
            ]
        })
        .collect();
    let mut out = String::new();
    table(&mut out, header, body);
    out
}
