//! Decomposed difficulty metrics.
//!
//! * D1: perplexity of the (linearized) instruction on its own.
//! * D2: conditional perplexity of the model's own greedy response A' given
//!   the instruction.
//! * D3: conditional perplexity of the reference response A given the
//!   instruction.
//!
//! D2 and D3 also have attention-weighted variants, where each response
//! token's log-probability is weighted by the attention it receives from the
//! tokens after it. All perplexities use natural logs; only [`entropy`] and
//! [`perplexity_from_entropy`] work in base 2.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{flatten_prompt, PromptTemplate, Sample};
use crate::scorer::{AttentionBlock, GenParams, ScorerBackend, ScorerError, TokenScoreRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    D1,
    D2,
    D3,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::D1, Metric::D2, Metric::D3];

    pub fn name(self) -> &'static str {
        match self {
            Metric::D1 => "d1",
            Metric::D2 => "d2",
            Metric::D3 => "d3",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DifficultyError {
    #[error("empty log-probability list")]
    EmptyLogprobs,
    #[error("logprob[{index}] = {value} is not a finite value <= 0")]
    InvalidLogprob { index: usize, value: f64 },
    #[error("{logprobs} logprobs but {importance} importance scores")]
    LengthMismatch { logprobs: usize, importance: usize },
    #[error("importance scores sum to zero")]
    ZeroImportance,
    #[error("invalid importance score {0}")]
    InvalidImportance(f64),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("{metric:?} is undefined for this sample: {reason}")]
    Unscoreable { metric: Metric, reason: String },
    #[error("attention-weighted {metric:?} requested but the backend returned no attention block")]
    AttentionMissing { metric: Metric },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

/// How attention from later tokens is folded into one importance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    /// Plain perplexity only; no attention requested.
    None,
}

impl Aggregation {
    pub fn wants_attention(self) -> bool {
        !matches!(self, Aggregation::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyVector {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    #[serde(default)]
    pub atten_d2: Option<f64>,
    #[serde(default)]
    pub atten_d3: Option<f64>,
    pub aggregation: Aggregation,
    pub generated_response: String,
}

impl DifficultyVector {
    /// Value used for banding. With `use_attention` the weighted D2/D3 are
    /// used when present.
    pub fn metric(&self, metric: Metric, use_attention: bool) -> f64 {
        match metric {
            Metric::D1 => self.d1,
            Metric::D2 if use_attention => self.atten_d2.unwrap_or(self.d2),
            Metric::D3 if use_attention => self.atten_d3.unwrap_or(self.d3),
            Metric::D2 => self.d2,
            Metric::D3 => self.d3,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let values = [Some(self.d1), Some(self.d2), Some(self.d3), self.atten_d2, self.atten_d3];
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 1.0) {
            return Err("difficulty values must be finite and >= 1".into());
        }
        if self.aggregation == Aggregation::None && (self.atten_d2.is_some() || self.atten_d3.is_some()) {
            return Err("aggregation=none cannot carry attention-weighted values".into());
        }
        Ok(())
    }
}

/// Per-token importance weights over a target span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector(Vec<f64>);

impl ImportanceVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, DifficultyError> {
        if let Some(&bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(DifficultyError::InvalidImportance(bad));
        }
        if !scores.iter().any(|&s| s > 0.0) {
            return Err(DifficultyError::ZeroImportance);
        }
        Ok(Self(scores))
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_logprobs(logprobs: &[f64]) -> Result<(), DifficultyError> {
    if logprobs.is_empty() {
        return Err(DifficultyError::EmptyLogprobs);
    }
    match logprobs.iter().position(|lp| !lp.is_finite() || *lp > 0.0) {
        Some(index) => Err(DifficultyError::InvalidLogprob { index, value: logprobs[index] }),
        None => Ok(()),
    }
}

/// `exp(-mean(logprobs))`.
pub fn ppl_from_logprobs(logprobs: &[f64]) -> Result<f64, DifficultyError> {
    check_logprobs(logprobs)?;
    let nll: f64 = logprobs.iter().map(|lp| -lp).sum();
    Ok((nll / logprobs.len() as f64).exp())
}

/// `exp(-Σ I_j·lp_j / Σ I_j)`.
pub fn weighted_ppl(logprobs: &[f64], importance: &ImportanceVector) -> Result<f64, DifficultyError> {
    check_logprobs(logprobs)?;
    if logprobs.len() != importance.len() {
        return Err(DifficultyError::LengthMismatch { logprobs: logprobs.len(), importance: importance.len() });
    }
    let den: f64 = importance.scores().iter().sum();
    if den <= 0.0 {
        return Err(DifficultyError::ZeroImportance);
    }
    let nll: f64 = logprobs.iter().zip(importance.scores()).map(|(lp, w)| (w / den) * -lp).sum();
    Ok(nll.exp())
}

/// Importance of each token as the mean or max of the attention it receives
/// from every later token.
///
/// The last token has no successors; it gets the mean of the other scores,
/// or 1.0 when it is the only token. If every aggregated score is zero the
/// block carries no signal and all tokens get weight 1.0.
pub fn importance_from_attention(block: &AttentionBlock, mode: Aggregation) -> Result<ImportanceVector, DifficultyError> {
    let n = block.n();
    if n == 1 {
        return ImportanceVector::new(vec![1.0]);
    }
    let mut scores = Vec::with_capacity(n);
    for i in 0..n - 1 {
        let received = (i + 1..n).map(|j| block.weight(j, i));
        let agg = match mode {
            Aggregation::Max => received.fold(0.0f64, f64::max),
            _ => received.sum::<f64>() / (n - 1 - i) as f64,
        };
        scores.push(agg);
    }
    let last = scores.iter().sum::<f64>() / scores.len() as f64;
    scores.push(last);
    match ImportanceVector::new(scores) {
        Err(DifficultyError::ZeroImportance) => ImportanceVector::new(vec![1.0; n]),
        other => other,
    }
}

/// Plain and (optionally) attention-weighted perplexity of one scored span.
pub fn span_difficulty(
    record: &TokenScoreRecord,
    mode: Aggregation,
    metric: Metric,
) -> Result<(f64, Option<f64>), DifficultyError> {
    let ppl = ppl_from_logprobs(&record.logprobs)?;
    if !mode.wants_attention() {
        return Ok((ppl, None));
    }
    let block = record.attention.as_ref().ok_or(DifficultyError::AttentionMissing { metric })?;
    let importance = importance_from_attention(block, mode)?;
    Ok((ppl, Some(weighted_ppl(&record.logprobs, &importance)?)))
}

fn score(
    backend: &dyn ScorerBackend,
    metric: Metric,
    context: &str,
    target: &str,
    want_attention: bool,
) -> Result<TokenScoreRecord, DifficultyError> {
    backend.score_target(context, target, want_attention).map_err(|e| match e {
        ScorerError::EmptyTarget => DifficultyError::Unscoreable { metric, reason: "target has no tokens".into() },
        other => other.into(),
    })
}

/// Instruction understanding difficulty.
pub fn compute_d1(sample: &Sample, backend: &dyn ScorerBackend, template: &PromptTemplate) -> Result<f64, DifficultyError> {
    let prompt = flatten_prompt(sample, template);
    let record = score(backend, Metric::D1, "", &prompt, false)?;
    ppl_from_logprobs(&record.logprobs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct D2Outcome {
    pub d2: f64,
    pub atten_d2: Option<f64>,
    pub a_prime: String,
}

/// Response confidence difficulty, scored on the model's own greedy answer.
pub fn compute_d2(
    sample: &Sample,
    backend: &dyn ScorerBackend,
    template: &PromptTemplate,
    params: &GenParams,
    mode: Aggregation,
) -> Result<D2Outcome, DifficultyError> {
    let prompt = flatten_prompt(sample, template);
    let a_prime = backend.generate(&prompt, params)?;
    if a_prime.trim().is_empty() {
        return Err(DifficultyError::Unscoreable { metric: Metric::D2, reason: "empty generation".into() });
    }
    let record = score(backend, Metric::D2, &prompt, &a_prime, mode.wants_attention())?;
    let (d2, atten_d2) = span_difficulty(&record, mode, Metric::D2)?;
    Ok(D2Outcome { d2, atten_d2, a_prime })
}

/// Response correctness difficulty, scored on the reference answer.
pub fn compute_d3(
    sample: &Sample,
    backend: &dyn ScorerBackend,
    template: &PromptTemplate,
    mode: Aggregation,
) -> Result<(f64, Option<f64>), DifficultyError> {
    let prompt = flatten_prompt(sample, template);
    let record = score(backend, Metric::D3, &prompt, &sample.response, mode.wants_attention())?;
    span_difficulty(&record, mode, Metric::D3)
}

/// All three metrics for one sample.
pub fn compute_vector(
    sample: &Sample,
    backend: &dyn ScorerBackend,
    template: &PromptTemplate,
    params: &GenParams,
    mode: Aggregation,
) -> Result<DifficultyVector, DifficultyError> {
    let d1 = compute_d1(sample, backend, template)?;
    let D2Outcome { d2, atten_d2, a_prime } = compute_d2(sample, backend, template, params, mode)?;
    let (d3, atten_d3) = compute_d3(sample, backend, template, mode)?;
    Ok(DifficultyVector { d1, d2, d3, atten_d2, atten_d3, aggregation: mode, generated_response: a_prime })
}

fn check_distribution(dist: &[f64]) -> Result<(), DifficultyError> {
    if dist.is_empty() {
        return Err(DifficultyError::InvalidDistribution("empty".into()));
    }
    if let Some(p) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(DifficultyError::InvalidDistribution(format!("entry {p}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DifficultyError::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(())
}

/// Shannon entropy in bits, with `0·log 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64, DifficultyError> {
    check_distribution(dist)?;
    Ok(dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum())
}

/// `2^h`.
pub fn perplexity_from_entropy(h: f64) -> f64 {
    h.exp2()
}
