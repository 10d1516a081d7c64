//! Difficulty distribution summaries and before/after comparisons of two
//! scoring snapshots over the same probe set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::difficulty::{DifficultyVector, Metric};
use crate::selection::nearest_rank;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("snapshot is empty")]
    EmptySnapshot,
    #[error("sample {id}: {reason}")]
    InvalidVector { id: String, reason: String },
    #[error("snapshots cover different samples: only before {only_before:?}, only after {only_after:?}")]
    IdMismatch { only_before: Vec<String>, only_after: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultySnapshot {
    pub model_id: String,
    #[serde(default)]
    pub label: String,
    /// Free-form creation time; left empty by the pipeline so outputs stay
    /// byte-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub samples: BTreeMap<String, DifficultyVector>,
}

impl DifficultySnapshot {
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.samples.is_empty() {
            return Err(ReportError::EmptySnapshot);
        }
        for (id, v) in &self.samples {
            v.validate().map_err(|reason| ReportError::InvalidVector { id: id.clone(), reason })?;
        }
        Ok(())
    }

    fn values(&self, metric: Metric) -> Vec<f64> {
        self.samples.values().map(|v| v.metric(metric, false)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub mean: f64,
}

impl MetricSummary {
    /// Nearest-rank quantiles. `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            min: sorted[0],
            p25: nearest_rank(&sorted, 25.0),
            median: nearest_rank(&sorted, 50.0),
            p75: nearest_rank(&sorted, 75.0),
            max: sorted[sorted.len() - 1],
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub count: usize,
    pub d1: MetricSummary,
    pub d2: MetricSummary,
    pub d3: MetricSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atten_d2: Option<MetricSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atten_d3: Option<MetricSummary>,
}

/// Summary of raw vectors. Weighted D2/D3 are summarized only when every
/// vector carries them.
pub fn summarize_vectors<'a>(vectors: impl IntoIterator<Item = &'a DifficultyVector>) -> Option<SnapshotSummary> {
    let vectors: Vec<&DifficultyVector> = vectors.into_iter().collect();
    let col = |f: &dyn Fn(&DifficultyVector) -> f64| vectors.iter().map(|v| f(v)).collect::<Vec<_>>();
    let opt_col = |f: &dyn Fn(&DifficultyVector) -> Option<f64>| {
        vectors.iter().map(|v| f(v)).collect::<Option<Vec<_>>>().and_then(|xs| MetricSummary::of(&xs))
    };
    Some(SnapshotSummary {
        count: vectors.len(),
        d1: MetricSummary::of(&col(&|v| v.d1))?,
        d2: MetricSummary::of(&col(&|v| v.d2))?,
        d3: MetricSummary::of(&col(&|v| v.d3))?,
        atten_d2: opt_col(&|v| v.atten_d2),
        atten_d3: opt_col(&|v| v.atten_d3),
    })
}

pub fn summarize(snapshot: &DifficultySnapshot) -> Result<SnapshotSummary, ReportError> {
    snapshot.validate()?;
    summarize_vectors(snapshot.samples.values()).ok_or(ReportError::EmptySnapshot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricShift {
    pub mean_delta: f64,
    pub median_delta: f64,
    pub frac_decreased: f64,
    pub iqr_before: f64,
    pub iqr_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub before: String,
    pub after: String,
    pub count: usize,
    pub d1: MetricShift,
    pub d2: MetricShift,
    pub d3: MetricShift,
}

impl ShiftReport {
    pub fn metric(&self, metric: Metric) -> &MetricShift {
        match metric {
            Metric::D1 => &self.d1,
            Metric::D2 => &self.d2,
            Metric::D3 => &self.d3,
        }
    }
}

fn iqr(values: &[f64]) -> f64 {
    let s = MetricSummary::of(values).expect("non-empty");
    s.p75 - s.p25
}

fn snapshot_name(s: &DifficultySnapshot) -> String {
    if s.label.is_empty() {
        s.model_id.clone()
    } else {
        s.label.clone()
    }
}

/// Paired `after − before` deltas per metric.
pub fn domain_shift(before: &DifficultySnapshot, after: &DifficultySnapshot) -> Result<ShiftReport, ReportError> {
    before.validate()?;
    after.validate()?;
    if !before.samples.keys().eq(after.samples.keys()) {
        return Err(ReportError::IdMismatch {
            only_before: before.samples.keys().filter(|k| !after.samples.contains_key(*k)).cloned().collect(),
            only_after: after.samples.keys().filter(|k| !before.samples.contains_key(*k)).cloned().collect(),
        });
    }
    let shift = |metric: Metric| {
        let b = before.values(metric);
        let a = after.values(metric);
        let deltas: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let n = deltas.len() as f64;
        let mut sorted = deltas.clone();
        sorted.sort_by(f64::total_cmp);
        MetricShift {
            mean_delta: deltas.iter().sum::<f64>() / n,
            median_delta: nearest_rank(&sorted, 50.0),
            frac_decreased: deltas.iter().filter(|d| **d < 0.0).count() as f64 / n,
            iqr_before: iqr(&b),
            iqr_after: iqr(&a),
        }
    };
    Ok(ShiftReport {
        before: snapshot_name(before),
        after: snapshot_name(after),
        count: before.samples.len(),
        d1: shift(Metric::D1),
        d2: shift(Metric::D2),
        d3: shift(Metric::D3),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub id: String,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub snapshot: String,
}

/// One row per (sample, snapshot), before rows first.
pub fn plot_rows(before: &DifficultySnapshot, after: &DifficultySnapshot) -> Vec<PlotRow> {
    [before, after]
        .into_iter()
        .flat_map(|s| {
            let name = snapshot_name(s);
            s.samples.iter().map(move |(id, v)| PlotRow { id: id.clone(), d1: v.d1, d2: v.d2, d3: v.d3, snapshot: name.clone() })
        })
        .collect()
}

pub fn plot_jsonl(rows: &[PlotRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
}
