//! Stage 2 selection: keep samples inside a percentile band on every
//! difficulty metric, then pick a diverse subset of the survivors with
//! greedy farthest-point (k-center) sampling on their embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::difficulty::{DifficultyVector, Metric};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("cannot compute percentiles of an empty population")]
    EmptyPopulation,
    #[error("invalid band [{p_low}, {p_high}]: need 0 <= p_low < p_high <= 100")]
    InvalidBand { p_low: f64, p_high: f64 },
    #[error("k must be at least 1")]
    ZeroBudget,
    #[error("no points to select from")]
    NoPoints,
    #[error("point {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("no sample lies inside every band ({population} scored); widen the bands")]
    EmptyMid { population: usize, thresholds: Box<Thresholds> },
}

/// Closed percentile interval `[p_low, p_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub p_low: f64,
    pub p_high: f64,
}

impl Band {
    pub fn new(p_low: f64, p_high: f64) -> Result<Self, SelectionError> {
        let band = Self { p_low, p_high };
        band.validate()?;
        Ok(band)
    }

    /// `[sigma - 25, sigma + 25]` clamped to `[0, 100]`.
    pub fn from_sigma(sigma: f64) -> Result<Self, SelectionError> {
        Self::new((sigma - 25.0).clamp(0.0, 100.0), (sigma + 25.0).clamp(0.0, 100.0))
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        let ok = self.p_low.is_finite()
            && self.p_high.is_finite()
            && 0.0 <= self.p_low
            && self.p_low < self.p_high
            && self.p_high <= 100.0;
        if ok {
            Ok(())
        } else {
            Err(SelectionError::InvalidBand { p_low: self.p_low, p_high: self.p_high })
        }
    }

    /// True when `self` lies within `other`.
    pub fn is_within(&self, other: &Band) -> bool {
        other.p_low <= self.p_low && self.p_high <= other.p_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub d1: Band,
    pub d2: Band,
    pub d3: Band,
    /// Band on the attention-weighted D2/D3 when they are available.
    pub use_attention_variant: bool,
}

impl BandConfig {
    pub fn shared(band: Band, use_attention_variant: bool) -> Self {
        Self { d1: band, d2: band, d3: band, use_attention_variant }
    }

    pub fn band(&self, metric: Metric) -> Band {
        match metric {
            Metric::D1 => self.d1,
            Metric::D2 => self.d2,
            Metric::D3 => self.d3,
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        Metric::ALL.iter().try_for_each(|&m| self.band(m).validate())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricThreshold {
    pub p_low: f64,
    pub p_high: f64,
    pub tau_low: f64,
    pub tau_high: f64,
}

impl MetricThreshold {
    pub fn contains(&self, x: f64) -> bool {
        self.tau_low <= x && x <= self.tau_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub d1: MetricThreshold,
    pub d2: MetricThreshold,
    pub d3: MetricThreshold,
}

impl Thresholds {
    pub fn get(&self, metric: Metric) -> &MetricThreshold {
        match metric {
            Metric::D1 => &self.d1,
            Metric::D2 => &self.d2,
            Metric::D3 => &self.d3,
        }
    }
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 · n)` clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64 / 100.0).ceil();
    let rank = if rank.is_nan() { 1 } else { (rank as usize).clamp(1, n) };
    sorted[rank - 1]
}

pub fn percentile_thresholds(values: &[f64], p_low: f64, p_high: f64) -> Result<(f64, f64), SelectionError> {
    if values.is_empty() {
        return Err(SelectionError::EmptyPopulation);
    }
    Band::new(p_low, p_high)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((nearest_rank(&sorted, p_low), nearest_rank(&sorted, p_high)))
}

/// Anything carrying a difficulty vector.
pub trait Scored {
    fn difficulty(&self) -> &DifficultyVector;
}

impl Scored for DifficultyVector {
    fn difficulty(&self) -> &DifficultyVector {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub difficulty: DifficultyVector,
    pub embedding: Vec<f64>,
}

impl Scored for ScoredSample {
    fn difficulty(&self) -> &DifficultyVector {
        &self.difficulty
    }
}

pub fn compute_thresholds<T: Scored>(items: &[T], config: &BandConfig) -> Result<Thresholds, SelectionError> {
    config.validate()?;
    let threshold = |metric: Metric| -> Result<MetricThreshold, SelectionError> {
        let values: Vec<f64> = items.iter().map(|x| x.difficulty().metric(metric, config.use_attention_variant)).collect();
        let band = config.band(metric);
        let (tau_low, tau_high) = percentile_thresholds(&values, band.p_low, band.p_high)?;
        Ok(MetricThreshold { p_low: band.p_low, p_high: band.p_high, tau_low, tau_high })
    };
    Ok(Thresholds { d1: threshold(Metric::D1)?, d2: threshold(Metric::D2)?, d3: threshold(Metric::D3)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandOutcome {
    /// Indices into the input, ascending.
    pub kept: Vec<usize>,
    pub thresholds: Thresholds,
}

/// Thresholds are computed over `items` itself; a sample is kept only if
/// every metric lies in its closed band.
pub fn band_filter<T: Scored>(items: &[T], config: &BandConfig) -> Result<BandOutcome, SelectionError> {
    let thresholds = compute_thresholds(items, config)?;
    let kept = items
        .iter()
        .enumerate()
        .filter(|(_, x)| {
            Metric::ALL
                .iter()
                .all(|&m| thresholds.get(m).contains(x.difficulty().metric(m, config.use_attention_variant)))
        })
        .map(|(i, _)| i)
        .collect();
    Ok(BandOutcome { kept, thresholds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "seed")]
pub enum KCenterStart {
    #[default]
    LowestIndex,
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

impl Distance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

fn check_points(points: &[Vec<f64>]) -> Result<(), SelectionError> {
    let Some(first) = points.first() else {
        return Err(SelectionError::NoPoints);
    };
    match points.iter().position(|p| p.len() != first.len()) {
        Some(index) => Err(SelectionError::DimensionMismatch { index, expected: first.len(), got: points[index].len() }),
        None => Ok(()),
    }
}

/// Greedy farthest-point selection. Returns indices in selection order;
/// `min(k, n)` of them. Ties go to the lowest index.
pub fn kcenter_select(points: &[Vec<f64>], k: usize, start: KCenterStart, distance: Distance) -> Result<Vec<usize>, SelectionError> {
    if k == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    check_points(points)?;
    let n = points.len();
    let first = match start {
        KCenterStart::LowestIndex => 0,
        KCenterStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..n),
    };
    let mut selected = vec![false; n];
    let mut order = Vec::with_capacity(k.min(n));
    let mut nearest = vec![f64::INFINITY; n];
    let mut newest = first;
    loop {
        selected[newest] = true;
        order.push(newest);
        if order.len() == k.min(n) {
            return Ok(order);
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = distance.between(p, &points[newest]);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if best.is_none_or(|(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        newest = best.expect("an unselected point remains").0;
    }
}

/// Largest distance from any point to its nearest center.
pub fn covering_radius(points: &[Vec<f64>], centers: &[usize], distance: Distance) -> f64 {
    points
        .iter()
        .map(|p| centers.iter().map(|&c| distance.between(p, &points[c])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KCenterSettings {
    pub start: KCenterStart,
    pub distance: Distance,
}

impl Default for KCenterSettings {
    fn default() -> Self {
        Self { start: KCenterStart::LowestIndex, distance: Distance::Euclidean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Outcome {
    pub selected_ids: Vec<String>,
    pub thresholds: Thresholds,
    pub s_mid_size: usize,
    /// `S_mid` had fewer than `k` members; all of them were returned.
    pub short_of_budget: bool,
}

/// Bands, then k-center on the band survivors.
pub fn select_stage2(
    scored: &[ScoredSample],
    config: &BandConfig,
    k: usize,
    kcenter: KCenterSettings,
) -> Result<Stage2Outcome, SelectionError> {
    if k == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    let band = band_filter(scored, config)?;
    if band.kept.is_empty() {
        return Err(SelectionError::EmptyMid { population: scored.len(), thresholds: Box::new(band.thresholds) });
    }
    let points: Vec<Vec<f64>> = band.kept.iter().map(|&i| scored[i].embedding.clone()).collect();
    let picked = kcenter_select(&points, k, kcenter.start, kcenter.distance)?;
    Ok(Stage2Outcome {
        selected_ids: picked.iter().map(|&p| scored[band.kept[p]].sample_id.clone()).collect(),
        thresholds: band.thresholds,
        s_mid_size: band.kept.len(),
        short_of_budget: band.kept.len() < k,
    })
}
