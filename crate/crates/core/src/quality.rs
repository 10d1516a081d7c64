//! Stage 1: the target model rates each sample with a rubric prompt and
//! samples scoring at or above `delta` are kept.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Sample;
use crate::parallel::ordered_map;
use crate::scorer::{GenParams, ScorerBackend, ScorerError};

/// Placeholder replaced by the rendered dialogue.
pub const QA_PLACEHOLDER: &str = "{{qa_pairs}}";
pub const BUILTIN_TEMPLATE_NAME: &str = "builtin:quality_prompt_v1";
const BUILTIN_TEMPLATE: &str = include_str!("../templates/quality_prompt_v1.txt");

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("cannot read quality template {path}: {source}")]
    TemplateIo { path: String, source: std::io::Error },
    #[error("quality template {0} has no {QA_PLACEHOLDER} placeholder")]
    MissingPlaceholder(String),
    #[error("stage 1 aborted at sample {sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: ScorerError,
    },
}

/// The rubric prompt, loaded from a versioned template file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityTemplate {
    name: String,
    text: String,
    hash: String,
}

impl Default for QualityTemplate {
    fn default() -> Self {
        Self::from_text(BUILTIN_TEMPLATE_NAME, BUILTIN_TEMPLATE).expect("builtin template has a placeholder")
    }
}

impl QualityTemplate {
    pub fn from_text(name: impl Into<String>, text: impl Into<String>) -> Result<Self, QualityError> {
        let name = name.into();
        let text = text.into();
        if !text.contains(QA_PLACEHOLDER) {
            return Err(QualityError::MissingPlaceholder(name));
        }
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(Self { name, text, hash })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QualityError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| QualityError::TemplateIo { path: path.display().to_string(), source })?;
        Self::from_text(path.display().to_string(), text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// SHA-256 of the template bytes.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Renders the dialogue (history turns, then the instruction and its
/// reference response) into the template's placeholder.
pub fn render_quality_prompt(sample: &Sample, template: &QualityTemplate) -> String {
    let mut dialogue = String::new();
    for turn in &sample.history {
        dialogue.push_str("User: ");
        dialogue.push_str(&turn.user);
        dialogue.push_str("\nAssistant: ");
        dialogue.push_str(&turn.assistant);
        dialogue.push('\n');
    }
    dialogue.push_str("User: ");
    dialogue.push_str(&sample.instruction);
    dialogue.push_str("\nAssistant: ");
    dialogue.push_str(&sample.response);
    template.text.replace(QA_PLACEHOLDER, &dialogue)
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ScoreParseError {
    #[error("no score marker followed by a number")]
    NoScore,
    #[error("score {0} outside [0, 100]")]
    OutOfRange(String),
    #[error("score {0} is not an integer")]
    NotInteger(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedScore {
    pub score: u8,
    /// A later marker carried a different number.
    pub conflicting: bool,
}

/// Reads the number after the first `score` marker that has one.
///
/// A marker is the word `score` (any case, optional trailing `s`, not part
/// of a longer word) followed by any run of whitespace, quotes, `*`, `_`,
/// backticks, `:`, `：`, `=`, or opening brackets. Never panics.
pub fn parse_score(raw: &str) -> Result<ParsedScore, ScoreParseError> {
    let mut candidates = markers(raw).filter_map(|pos| number_after(&raw[pos..]));
    let first = candidates.next().ok_or(ScoreParseError::NoScore)?;
    let score = first.clone().into_score()?;
    let conflicting = candidates.any(|c| c != first);
    Ok(ParsedScore { score, conflicting })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Number {
    Int { negative: bool, digits: String },
    Fraction(String),
}

impl Number {
    fn into_score(self) -> Result<u8, ScoreParseError> {
        match self {
            Number::Fraction(text) => Err(ScoreParseError::NotInteger(text)),
            Number::Int { negative, digits } => {
                let trimmed = digits.trim_start_matches('0');
                let text = if negative { format!("-{digits}") } else { digits.clone() };
                if negative && !trimmed.is_empty() {
                    return Err(ScoreParseError::OutOfRange(text));
                }
                match trimmed.len() {
                    0 => Ok(0),
                    1..=3 => match trimmed.parse::<u16>() {
                        Ok(v) if v <= 100 => Ok(v as u8),
                        _ => Err(ScoreParseError::OutOfRange(text)),
                    },
                    _ => Err(ScoreParseError::OutOfRange(text)),
                }
            }
        }
    }
}

/// Byte offsets just past each `score` marker word.
fn markers(raw: &str) -> impl Iterator<Item = usize> + '_ {
    let bytes = raw.as_bytes();
    (0..bytes.len().saturating_sub(4)).filter_map(move |i| {
        if !bytes[i..i + 5].eq_ignore_ascii_case(b"score") {
            return None;
        }
        if i > 0 && bytes[i - 1].is_ascii_alphanumeric() {
            return None;
        }
        let mut end = i + 5;
        if bytes.get(end).is_some_and(|b| b.eq_ignore_ascii_case(&b's')) {
            end += 1;
        }
        if bytes.get(end).is_some_and(|b| b.is_ascii_alphanumeric() && !b.is_ascii_digit()) {
            return None;
        }
        Some(end)
    })
}

fn number_after(rest: &str) -> Option<Number> {
    let rest = rest.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '*' | '_' | '`' | ':' | '：' | '=' | '{' | '[' | '(')
    });
    let (negative, rest) = match rest.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    let after = &rest[digits.len()..];
    let mut frac = after.strip_prefix('.').map(|f| f.chars().take_while(char::is_ascii_digit).collect::<String>());
    if frac.as_ref().is_some_and(|f| f.is_empty()) {
        frac = None;
    }
    Some(match frac {
        Some(f) => Number::Fraction(format!("{}{digits}.{f}", if negative { "-" } else { "" })),
        None => Number::Int { negative, digits },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityStatus {
    Parsed,
    ParseFailed,
    BackendFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityResult {
    pub sample_id: String,
    pub raw_output: String,
    pub score: Option<u8>,
    pub status: QualityStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Settings {
    pub delta: u32,
    pub params: GenParams,
    /// Extra attempts after an unparseable output.
    pub parse_retries: u32,
}

impl Default for Stage1Settings {
    fn default() -> Self {
        Self { delta: 90, params: GenParams::greedy(32, Vec::new()), parse_retries: 2 }
    }
}

/// Asks the model to rate one sample. Transient backend errors are
/// returned; deterministic ones (window overflow, invalid request) become a
/// `BackendFailed` result.
pub fn assess_quality(
    sample: &Sample,
    backend: &dyn ScorerBackend,
    template: &QualityTemplate,
    settings: &Stage1Settings,
) -> Result<QualityResult, ScorerError> {
    let prompt = render_quality_prompt(sample, template);
    let mut attempts = 0;
    loop {
        attempts += 1;
        let raw = match backend.generate(&prompt, &settings.params) {
            Ok(raw) => raw,
            Err(e) if e.is_retryable() => return Err(e),
            Err(e) => {
                return Ok(QualityResult {
                    sample_id: sample.id.clone(),
                    raw_output: String::new(),
                    score: None,
                    status: QualityStatus::BackendFailed,
                    attempts,
                    warning: Some(e.to_string()),
                })
            }
        };
        match parse_score(&raw) {
            Ok(parsed) => {
                return Ok(QualityResult {
                    sample_id: sample.id.clone(),
                    raw_output: raw,
                    score: Some(parsed.score),
                    status: QualityStatus::Parsed,
                    attempts,
                    warning: parsed.conflicting.then(|| "conflicting score markers; first one used".to_string()),
                })
            }
            Err(e) if attempts > settings.parse_retries => {
                return Ok(QualityResult {
                    sample_id: sample.id.clone(),
                    raw_output: raw,
                    score: None,
                    status: QualityStatus::ParseFailed,
                    attempts,
                    warning: Some(e.to_string()),
                })
            }
            Err(_) => continue,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Counts {
    pub input: u64,
    pub retained: u64,
    pub below_threshold: u64,
    pub parse_failed: u64,
    pub backend_failed: u64,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub retained: Vec<Sample>,
    pub results: Vec<QualityResult>,
    pub counts: Stage1Counts,
}

/// Keeps samples whose parsed score is `>= delta`, preserving input order.
pub fn retain_by_score(samples: &[Sample], results: Vec<QualityResult>, delta: u32) -> Stage1Outcome {
    let mut counts = Stage1Counts { input: samples.len() as u64, ..Default::default() };
    let mut retained = Vec::new();
    for (sample, result) in samples.iter().zip(&results) {
        match (result.status, result.score) {
            (QualityStatus::Parsed, Some(score)) if u32::from(score) >= delta => {
                counts.retained += 1;
                retained.push(sample.clone());
            }
            (QualityStatus::Parsed, _) => counts.below_threshold += 1,
            (QualityStatus::ParseFailed, _) => counts.parse_failed += 1,
            (QualityStatus::BackendFailed, _) => counts.backend_failed += 1,
        }
    }
    Stage1Outcome { retained, results, counts }
}

/// Runs Stage 1 with a caller-supplied per-sample assessor (used to put a
/// cache in front of the backend).
pub fn stage1_filter_with<F>(samples: &[Sample], delta: u32, concurrency: usize, assess: F) -> Result<Stage1Outcome, QualityError>
where
    F: Fn(&Sample) -> Result<QualityResult, ScorerError> + Sync + Send,
{
    let results = ordered_map(samples, concurrency, |s| assess(s).map_err(|e| (s.id.clone(), e)));
    let results = results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|(sample_id, source)| QualityError::Backend { sample_id, source })?;
    Ok(retain_by_score(samples, results, delta))
}

pub fn stage1_filter(
    samples: &[Sample],
    backend: &dyn ScorerBackend,
    template: &QualityTemplate,
    settings: &Stage1Settings,
    concurrency: usize,
) -> Result<Stage1Outcome, QualityError> {
    stage1_filter_with(samples, settings.delta, concurrency, |s| assess_quality(s, backend, template, settings))
}
