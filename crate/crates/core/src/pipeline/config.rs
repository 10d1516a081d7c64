use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{OnError, PromptTemplate};
use crate::difficulty::Aggregation;
use crate::quality::Stage1Settings;
use crate::scorer::{GenParams, RetryPolicy, MAX_NEW_TOKENS_CEILING};
use crate::selection::{Band, BandConfig, Distance, KCenterSettings, KCenterStart};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config field `{0}`")]
    UnknownField(String),
    #[error("override `{path}` expects {expected}, got `{value}`")]
    TypeMismatch { path: String, expected: &'static str, value: String },
    #[error("malformed override `{0}` (expected dotted.path=value)")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    MissingPath { what: &'static str, path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// One window (`selection.band`) on all three metrics.
    #[default]
    Shared,
    /// Independent windows `selection.d1`, `selection.d2`, `selection.d3`.
    PerMetric,
    /// `[sigma - 25, sigma + 25]` on all three metrics.
    Sigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    #[default]
    LowestIndex,
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub delta: u32,
    /// Path of the quality prompt template; empty means the built-in one.
    pub template: String,
    pub max_new_tokens: u32,
    pub parse_retries: u32,
}

impl Default for QualityConfig {
    fn default() -> Self {
        let s = Stage1Settings::default();
        Self { delta: s.delta, template: String::new(), max_new_tokens: s.params.max_new_tokens, parse_retries: s.parse_retries }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyConfig {
    pub aggregation: Aggregation,
    pub max_new_tokens: u32,
    pub stop: Vec<String>,
    pub turn_template: String,
    pub query_template: String,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        let t = PromptTemplate::default();
        Self { aggregation: Aggregation::Mean, max_new_tokens: 256, stop: Vec::new(), turn_template: t.turn, query_template: t.query }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    pub band_mode: BandMode,
    pub band: Band,
    pub sigma: f64,
    pub d1: Band,
    pub d2: Band,
    pub d3: Band,
    pub use_attention_variant: bool,
    pub start: StartRule,
    pub seed: u64,
    pub distance: Distance,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let band = Band { p_low: 10.0, p_high: 60.0 };
        Self {
            k: 5000,
            band_mode: BandMode::Shared,
            band,
            sigma: 35.0,
            d1: band,
            d2: band,
            d3: band,
            use_attention_variant: true,
            start: StartRule::LowestIndex,
            seed: 0,
            distance: Distance::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: String,
    /// `http://host:port` or `mock:<mock config path>`.
    pub backend: String,
    pub output_dir: String,
    pub cache_dir: String,
    pub concurrency: usize,
    pub backend_timeout_secs: u64,
    pub on_error: OnError,
    pub retry: RetryPolicy,
    pub quality: QualityConfig,
    pub difficulty: DifficultyConfig,
    pub selection: SelectionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            backend: "http://127.0.0.1:8731".into(),
            output_dir: "dds-out".into(),
            cache_dir: ".dds-cache".into(),
            concurrency: 4,
            backend_timeout_secs: 120,
            on_error: OnError::FailFast,
            retry: RetryPolicy::default(),
            quality: QualityConfig::default(),
            difficulty: DifficultyConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

const FIELD_HELP: &[(&str, &str)] = &[
    ("corpus", "input corpus, one JSON sample per line"),
    ("backend", "scoring backend: http://host:port or mock:<config file>"),
    ("output_dir", "directory for manifest and result files"),
    ("cache_dir", "content-addressed score cache"),
    ("concurrency", "max in-flight backend requests"),
    ("backend_timeout_secs", "per-request HTTP timeout"),
    ("on_error", "malformed corpus lines: fail_fast | skip_and_count"),
    ("retry.max_retries", "retries after a transient backend failure"),
    ("retry.backoff_ms", "linear backoff step between retries"),
    ("quality.delta", "keep samples with quality score >= delta"),
    ("quality.template", "quality prompt template file (empty = built-in)"),
    ("quality.max_new_tokens", "generation length for the quality rating"),
    ("quality.parse_retries", "extra attempts after an unparseable rating"),
    ("difficulty.aggregation", "attention aggregation: mean | max | none"),
    ("difficulty.max_new_tokens", "generation length for the model answer"),
    ("difficulty.stop", "stop sequences for the model answer"),
    ("difficulty.turn_template", "history turn template ({u}, {a})"),
    ("difficulty.query_template", "final instruction template ({q})"),
    ("selection.k", "sampling budget"),
    ("selection.band_mode", "shared | per_metric | sigma"),
    ("selection.band.p_low", "shared window lower percentile"),
    ("selection.band.p_high", "shared window upper percentile"),
    ("selection.sigma", "window centre for band_mode = sigma"),
    ("selection.d1.p_low", "D1 lower percentile (per_metric)"),
    ("selection.d1.p_high", "D1 upper percentile (per_metric)"),
    ("selection.d2.p_low", "D2 lower percentile (per_metric)"),
    ("selection.d2.p_high", "D2 upper percentile (per_metric)"),
    ("selection.d3.p_low", "D3 lower percentile (per_metric)"),
    ("selection.d3.p_high", "D3 upper percentile (per_metric)"),
    ("selection.use_attention_variant", "band on attention-weighted D2/D3 when present"),
    ("selection.start", "k-center start: lowest_index | seeded"),
    ("selection.seed", "seed for start = seeded"),
    ("selection.distance", "k-center distance: euclidean | cosine"),
];

/// One documented config field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDoc {
    pub path: String,
    pub default: String,
    pub help: &'static str,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&path, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn type_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "a string",
        toml::Value::Integer(_) => "an integer",
        toml::Value::Float(_) => "a number",
        toml::Value::Boolean(_) => "a boolean",
        toml::Value::Datetime(_) => "a datetime",
        toml::Value::Array(_) => "an array",
        toml::Value::Table(_) => "a table",
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in overlay {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(ConfigError::UnknownField(path)),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> Option<toml::Value> {
    let doc: toml::Table = format!("v = {raw}").parse().ok()?;
    doc.get("v").cloned()
}

/// Coerces a raw override string to the type of `current`.
fn coerce(path: &str, current: &toml::Value, raw: &str) -> Result<toml::Value, ConfigError> {
    let mismatch = || ConfigError::TypeMismatch { path: path.to_string(), expected: type_name(current), value: raw.to_string() };
    let parsed = parse_override_value(raw);
    match current {
        toml::Value::String(_) => Ok(match parsed {
            Some(toml::Value::String(s)) => toml::Value::String(s),
            _ => toml::Value::String(raw.to_string()),
        }),
        toml::Value::Float(_) => match parsed {
            Some(toml::Value::Float(f)) => Ok(toml::Value::Float(f)),
            Some(toml::Value::Integer(i)) => Ok(toml::Value::Float(i as f64)),
            _ => Err(mismatch()),
        },
        toml::Value::Table(_) => Err(mismatch()),
        other => match parsed {
            Some(p) if std::mem::discriminant(&p) == std::mem::discriminant(other) => Ok(p),
            _ => Err(mismatch()),
        },
    }
}

/// Applies `dotted.path=value` to a config document. The path must name an
/// existing leaf and the value must have its type (integers promote to
/// floats; string fields take the raw text).
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let mut parts = path.split('.').peekable();
    let mut table = doc;
    while let Some(part) = parts.next() {
        let unknown = || ConfigError::UnknownField(path.to_string());
        if parts.peek().is_none() {
            let slot = table.get_mut(part).ok_or_else(unknown)?;
            *slot = coerce(path, slot, raw)?;
            return Ok(());
        }
        table = match table.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
    }
    unreachable!("split yields at least one part")
}

impl PipelineConfig {
    /// Defaults, overlaid by `file_text` (TOML), then by each override.
    pub fn build(file_text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc = Self::default().to_table();
        if let Some(text) = file_text {
            let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
            merge(&mut doc, overlay, "")?;
        }
        for spec in overrides {
            apply_override(&mut doc, spec)?;
        }
        let config: Self = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = path
            .map(|p| {
                std::fs::read_to_string(p).map_err(|e| ConfigError::Io { path: p.display().to_string(), message: e.to_string() })
            })
            .transpose()?;
        Self::build(text.as_deref(), overrides)
    }

    fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every leaf field with its default value, sorted by path.
    pub fn field_docs() -> Vec<FieldDoc> {
        let mut leaves = Vec::new();
        flatten("", &toml::Value::Table(Self::default().to_table()), &mut leaves);
        leaves
            .into_iter()
            .map(|(path, value)| {
                let help = FIELD_HELP.iter().find(|(p, _)| *p == path).map(|(_, h)| *h).unwrap_or("");
                let default = match &value {
                    toml::Value::String(s) => serde_json::to_string(s).expect("string serializes"),
                    other => other.to_string(),
                };
                FieldDoc { path, default, help }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.selection.k == 0 {
            return invalid("selection.k must be >= 1".into());
        }
        if self.concurrency == 0 {
            return invalid("concurrency must be >= 1".into());
        }
        if self.corpus.is_empty() {
            return invalid("corpus path is empty".into());
        }
        self.quality_params().validate(MAX_NEW_TOKENS_CEILING).map_err(|e| ConfigError::Invalid(format!("quality: {e}")))?;
        self.difficulty_params().validate(MAX_NEW_TOKENS_CEILING).map_err(|e| ConfigError::Invalid(format!("difficulty: {e}")))?;
        self.band_config()?;
        if !(self.backend.starts_with("http://") || self.backend.starts_with("https://") || self.backend.starts_with("mock:")) {
            return invalid(format!("backend `{}` must be http://... or mock:<path>", self.backend));
        }
        Ok(())
    }

    /// Every referenced input path exists.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let missing = |what, path: &str| ConfigError::MissingPath { what, path: path.to_string() };
        if !Path::new(&self.corpus).is_file() {
            return Err(missing("corpus file", &self.corpus));
        }
        if !self.quality.template.is_empty() && !Path::new(&self.quality.template).is_file() {
            return Err(missing("quality template", &self.quality.template));
        }
        if let Some(mock) = self.backend.strip_prefix("mock:") {
            if !Path::new(mock).is_file() {
                return Err(missing("mock backend config", mock));
            }
        }
        Ok(())
    }

    pub fn band_config(&self) -> Result<BandConfig, ConfigError> {
        let s = &self.selection;
        let bad = |e: crate::selection::SelectionError| ConfigError::Invalid(format!("selection: {e}"));
        let config = match s.band_mode {
            BandMode::Shared => BandConfig::shared(s.band, s.use_attention_variant),
            BandMode::Sigma => BandConfig::shared(Band::from_sigma(s.sigma).map_err(bad)?, s.use_attention_variant),
            BandMode::PerMetric => BandConfig { d1: s.d1, d2: s.d2, d3: s.d3, use_attention_variant: s.use_attention_variant },
        };
        config.validate().map_err(bad)?;
        Ok(config)
    }

    pub fn kcenter(&self) -> KCenterSettings {
        let start = match self.selection.start {
            StartRule::LowestIndex => KCenterStart::LowestIndex,
            StartRule::Seeded => KCenterStart::Seeded(self.selection.seed),
        };
        KCenterSettings { start, distance: self.selection.distance }
    }

    pub fn quality_params(&self) -> GenParams {
        GenParams::greedy(self.quality.max_new_tokens, Vec::new())
    }

    pub fn stage1_settings(&self) -> Stage1Settings {
        Stage1Settings { delta: self.quality.delta, params: self.quality_params(), parse_retries: self.quality.parse_retries }
    }

    pub fn difficulty_params(&self) -> GenParams {
        GenParams::greedy(self.difficulty.max_new_tokens, self.difficulty.stop.clone())
    }

    pub fn prompt_template(&self) -> PromptTemplate {
        PromptTemplate::new(self.difficulty.turn_template.clone(), self.difficulty.query_template.clone())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Same config with a σ-window.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut c = self.clone();
        c.selection.band_mode = BandMode::Sigma;
        c.selection.sigma = sigma;
        c
    }
}
