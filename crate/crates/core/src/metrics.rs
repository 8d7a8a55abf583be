//! Multi-recall@K, Recall@K and their per-group means.

use crate::types::{GranularityLevel, RetrievalMode};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("prediction list repeats `{0}`")]
    DuplicatePrediction(String),
}

/// `|P ∩ T| / max(K, |P|)`.
///
/// With one relevant image and `|P| = K` a hit scores `1 / K`, so this is not
/// the 0/1 Recall@K even in the one-to-one case.
pub fn multi_recall_at_k<S: AsRef<str>>(predicted: &[S], truth: &BTreeSet<String>, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let mut seen = HashSet::with_capacity(predicted.len());
    let mut c = 0usize;
    for p in predicted {
        let p = p.as_ref();
        if !seen.insert(p) {
            return Err(MetricError::DuplicatePrediction(p.to_string()));
        }
        if truth.contains(p) {
            c += 1;
        }
    }
    Ok(c as f64 / k.max(predicted.len()) as f64)
}

/// 1 when any of the first `k` predictions is relevant.
pub fn recall_at_k<S: AsRef<str>>(predicted: &[S], truth: &BTreeSet<String>, k: usize) -> Result<u8, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    Ok(u8::from(predicted.iter().take(k).any(|p| truth.contains(p.as_ref()))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub encoder: String,
    pub mode: RetrievalMode,
    pub granularity: GranularityLevel,
    pub query_id: String,
    pub k: usize,
    pub multi_recall_at_k: f64,
    pub recall_at_k: u8,
    pub predicted_ids: Vec<String>,
    pub true_ids: BTreeSet<String>,
    #[serde(default)]
    pub candidate_set_size: usize,
    #[serde(default)]
    pub fell_back: bool,
}

impl EvalRecord {
    /// Scores `predicted` truncated to `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        encoder: &str,
        mode: RetrievalMode,
        granularity: GranularityLevel,
        query_id: &str,
        predicted: Vec<String>,
        truth: BTreeSet<String>,
        k: usize,
    ) -> Result<Self, MetricError> {
        let mut predicted = predicted;
        predicted.truncate(k);
        Ok(EvalRecord {
            encoder: encoder.to_string(),
            mode,
            granularity,
            query_id: query_id.to_string(),
            k,
            multi_recall_at_k: multi_recall_at_k(&predicted, &truth, k)?,
            recall_at_k: recall_at_k(&predicted, &truth, k)?,
            predicted_ids: predicted,
            true_ids: truth,
            candidate_set_size: 0,
            fell_back: false,
        })
    }
}

/// A percentage held as integer hundredths, so report values and their
/// differences are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(pub i64);

impl Percent {
    /// `fraction * 100`, rounded half up to two decimals.
    pub fn from_fraction(fraction: f64) -> Self {
        // The small bias absorbs representation error on exact halves.
        Percent((fraction * 10_000.0 + 0.5 + 1e-7).floor() as i64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl std::ops::Sub for Percent {
    type Output = Percent;
    fn sub(self, rhs: Percent) -> Percent {
        Percent(self.0 - rhs.0)
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", a / 100, a % 100)
    }
}

impl std::str::FromStr for Percent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (neg, body) = match s.strip_prefix('-') {
            Some(b) => (true, b),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (whole, frac) = body.split_once('.').unwrap_or((body, "0"));
        if frac.len() > 2 || whole.is_empty() {
            return Err(format!("`{s}` is not a percentage with at most two decimals"));
        }
        let w: i64 = whole.parse().map_err(|_| format!("bad percentage `{s}`"))?;
        let f: i64 = format!("{frac:0<2}").parse().map_err(|_| format!("bad percentage `{s}`"))?;
        let v = w * 100 + f;
        Ok(Percent(if neg { -v } else { v }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupBy {
    pub encoder: bool,
    pub granularity: bool,
    pub mode: bool,
}

impl GroupBy {
    pub const ALL: GroupBy = GroupBy { encoder: true, granularity: true, mode: true };
}

/// Group key; a `None` part means the records were not split on it.
/// Ordered by encoder, then granularity, then mode.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub encoder: Option<String>,
    pub granularity: Option<GranularityLevel>,
    pub mode: Option<RetrievalMode>,
}

impl CellKey {
    pub fn new(encoder: &str, granularity: GranularityLevel, mode: RetrievalMode) -> Self {
        CellKey { encoder: Some(encoder.to_string()), granularity: Some(granularity), mode: Some(mode) }
    }

    fn of(r: &EvalRecord, by: GroupBy) -> Self {
        CellKey {
            encoder: by.encoder.then(|| r.encoder.clone()),
            granularity: by.granularity.then_some(r.granularity),
            mode: by.mode.then_some(r.mode),
        }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.encoder.as_deref().unwrap_or("*"),
            self.granularity.map_or("*", |g| g.as_str()),
            self.mode.map_or("*", |m| m.as_str())
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub key: CellKey,
    pub count: usize,
    pub multi_recall: Percent,
    pub recall: Percent,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregation {
    pub rows: Vec<AggregateRow>,
    pub warnings: Vec<String>,
}

/// Unweighted means per group, rows in key order. Each key in `expected`
/// that has no records is reported in `warnings` instead of a row.
pub fn aggregate(records: &[EvalRecord], by: GroupBy, expected: &[CellKey]) -> Aggregation {
    let mut groups: BTreeMap<CellKey, (usize, f64, u64)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(CellKey::of(r, by)).or_default();
        g.0 += 1;
        g.1 += r.multi_recall_at_k;
        g.2 += u64::from(r.recall_at_k);
    }
    let mut warnings: Vec<String> =
        expected.iter().filter(|k| !groups.contains_key(k)).map(|k| format!("no records for {k}")).collect();
    warnings.sort();
    warnings.dedup();
    let rows = groups
        .into_iter()
        .map(|(key, (n, mr, r))| AggregateRow {
            key,
            count: n,
            multi_recall: Percent::from_fraction(mr / n as f64),
            recall: Percent::from_fraction(r as f64 / n as f64),
        })
        .collect();
    Aggregation { rows, warnings }
}
