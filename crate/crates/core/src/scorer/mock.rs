//! Deterministic in-process backend driven by a config table.
//!
//! Tokenization is whitespace splitting. Every target token is scored by a
//! context-free unigram table, so `score_target` is exactly a table lookup.
//! Generations come from canned prompt→text entries, then substring rules,
//! then greedy unigram decoding (the most probable token repeated).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{truncate_generation, AttentionBlock, GenParams, ModelInfo, ScorerBackend, ScorerError, TokenScoreRecord};

pub const DEFAULT_MOCK_MODEL_ID: &str = "mock-unigram-v1";
/// Token used for out-of-vocabulary lookups when present in the table.
pub const UNK_TOKEN: &str = "<unk>";

fn default_model_id() -> String {
    DEFAULT_MOCK_MODEL_ID.into()
}
fn default_tokenizer_id() -> String {
    "whitespace".into()
}
fn default_embedding_dim() -> usize {
    8
}
fn default_max_context_tokens() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRule {
    pub contains: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AttentionRule {
    /// Attention is not supported; requests for it get no block.
    #[default]
    None,
    /// Every strictly-lower entry equals `weight`.
    Uniform { weight: f64 },
    /// Row `j` spreads `salience(token_i) / j` onto each earlier token `i`.
    Salience {
        #[serde(default)]
        salience: BTreeMap<String, f64>,
        #[serde(default = "one")]
        default_salience: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRule {
    /// SHA-256 derived vector of the whole text.
    #[default]
    Hash,
    /// Mean of per-token hash vectors; texts sharing tokens land nearby.
    BagOfTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_tokenizer_id")]
    pub tokenizer_id: String,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_max_context_tokens")]
    pub max_context_tokens: usize,
    /// Token probabilities; must sum to 1 within 1e-9.
    pub unigram: BTreeMap<String, f64>,
    #[serde(default)]
    pub generations: BTreeMap<String, String>,
    #[serde(default)]
    pub generation_rules: Vec<GenerationRule>,
    #[serde(default)]
    pub attention: AttentionRule,
    /// Canned blocks keyed by exact target text; take precedence over `attention`.
    #[serde(default)]
    pub attention_blocks: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub embedding_rule: EmbeddingRule,
}

impl MockConfig {
    pub fn from_unigram<I, S>(table: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            model_id: default_model_id(),
            tokenizer_id: default_tokenizer_id(),
            embedding_dim: default_embedding_dim(),
            max_context_tokens: default_max_context_tokens(),
            unigram: table.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            generations: BTreeMap::new(),
            generation_rules: Vec::new(),
            attention: AttentionRule::None,
            attention_blocks: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            embedding_rule: EmbeddingRule::Hash,
        }
    }

    /// Loads a JSON (`.json`) or TOML (anything else) config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScorerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ScorerError::InvalidConfig {
            message: format!("{}: {e}", path.display()),
        })?;
        let parsed: Result<Self, String> = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg = parsed.map_err(|e| ScorerError::InvalidConfig { message: format!("{}: {e}", path.display()) })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |message: String| Err(ScorerError::InvalidConfig { message });
        if self.model_id.is_empty() {
            return bad("model_id must be non-empty".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.max_context_tokens == 0 {
            return bad("max_context_tokens must be positive".into());
        }
        if self.unigram.is_empty() {
            return bad("unigram table is empty".into());
        }
        for (tok, &p) in &self.unigram {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("probability of {tok:?} is {p}; must be in (0, 1]"));
            }
        }
        let total: f64 = self.unigram.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("unigram probabilities sum to {total}, not 1"));
        }
        for (target, rows) in &self.attention_blocks {
            let block = AttentionBlock::new(rows.clone())
                .map_err(|e| ScorerError::InvalidConfig { message: format!("attention block for {target:?}: {e}") })?;
            if block.n() != target.split_whitespace().count() {
                return bad(format!("attention block for {target:?} does not match its token count"));
            }
        }
        match &self.attention {
            AttentionRule::Uniform { weight } if !(weight.is_finite() && *weight >= 0.0) => {
                return bad(format!("uniform attention weight {weight} must be finite and >= 0"));
            }
            AttentionRule::Salience { salience, default_salience } => {
                if salience.values().chain([default_salience]).any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return bad("salience values must be finite and >= 0".into());
                }
            }
            _ => {}
        }
        for (text, v) in &self.embeddings {
            if v.len() != self.embedding_dim || v.iter().any(|x| !x.is_finite()) {
                return bad(format!("canned embedding for {text:?} must have {} finite values", self.embedding_dim));
            }
        }
        Ok(())
    }

    /// Stable digest of the full config, used to identify in-process mocks.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("mock config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Default)]
struct Counters {
    score: AtomicU64,
    generate: AtomicU64,
    embed: AtomicU64,
    info: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CallCounts {
    pub score: u64,
    pub generate: u64,
    pub embed: u64,
    pub info: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.score + self.generate + self.embed + self.info
    }
}

#[derive(Debug)]
pub struct MockBackend {
    config: MockConfig,
    greedy_token: String,
    counters: Counters,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self, ScorerError> {
        config.validate()?;
        // Highest probability; BTreeMap order makes ties resolve to the
        // lexicographically smallest token.
        let greedy_token = config
            .unigram
            .iter()
            .filter(|(t, _)| t.as_str() != UNK_TOKEN)
            .fold(None::<(&String, f64)>, |best, (t, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((t, p)),
            })
            .map(|(t, _)| t.clone())
            .unwrap_or_else(|| UNK_TOKEN.to_string());
        Ok(Self { config, greedy_token, counters: Counters::default() })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    pub fn calls(&self) -> CallCounts {
        CallCounts {
            score: self.counters.score.load(Ordering::SeqCst),
            generate: self.counters.generate.load(Ordering::SeqCst),
            embed: self.counters.embed.load(Ordering::SeqCst),
            info: self.counters.info.load(Ordering::SeqCst),
        }
    }

    pub fn reset_calls(&self) {
        for c in [&self.counters.score, &self.counters.generate, &self.counters.embed, &self.counters.info] {
            c.store(0, Ordering::SeqCst);
        }
    }

    fn logprob(&self, token: &str) -> Result<f64, ScorerError> {
        self.config
            .unigram
            .get(token)
            .or_else(|| self.config.unigram.get(UNK_TOKEN))
            .map(|p| p.ln())
            .ok_or_else(|| ScorerError::invalid_request(format!("token {token:?} not in mock vocabulary")))
    }

    fn attention_for(&self, target: &str, tokens: &[&str]) -> Option<AttentionBlock> {
        if let Some(rows) = self.config.attention_blocks.get(target) {
            return Some(AttentionBlock::new(rows.clone()).expect("validated at construction"));
        }
        let n = tokens.len();
        match &self.config.attention {
            AttentionRule::None => None,
            AttentionRule::Uniform { weight } => Some(AttentionBlock::from_fn(n, |_, _| *weight).expect("valid weight")),
            AttentionRule::Salience { salience, default_salience } => Some(
                AttentionBlock::from_fn(n, |j, i| {
                    salience.get(tokens[i]).copied().unwrap_or(*default_salience) / j as f64
                })
                .expect("valid salience"),
            ),
        }
    }

    fn hash_vector(&self, text: &str) -> Vec<f64> {
        (0..self.config.embedding_dim).map(|d| hash_unit(text, d as u32)).collect()
    }
}

/// Maps `(text, dim)` to a deterministic value in [-1, 1).
pub fn hash_unit(text: &str, dim: u32) -> f64 {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update([0u8]);
    h.update(dim.to_le_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let bits = u64::from_le_bytes(word) >> 11;
    bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl ScorerBackend for MockBackend {
    fn score_target(&self, context: &str, target: &str, want_attention: bool) -> Result<TokenScoreRecord, ScorerError> {
        self.counters.score.fetch_add(1, Ordering::SeqCst);
        let tokens: Vec<&str> = target.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(ScorerError::EmptyTarget);
        }
        let context_tokens = context.split_whitespace().count();
        if context_tokens + tokens.len() > self.config.max_context_tokens {
            return Err(ScorerError::WindowExceeded {
                context_tokens,
                target_tokens: tokens.len(),
                limit: self.config.max_context_tokens,
            });
        }
        let logprobs = tokens.iter().map(|t| self.logprob(t)).collect::<Result<Vec<_>, _>>()?;
        let attention = if want_attention { self.attention_for(target, &tokens) } else { None };
        Ok(TokenScoreRecord { target_tokens: tokens.iter().map(|t| t.to_string()).collect(), logprobs, attention })
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScorerError> {
        self.counters.generate.fetch_add(1, Ordering::SeqCst);
        if prompt.is_empty() {
            return Err(ScorerError::invalid_request("empty prompt"));
        }
        params.validate(u32::MAX).map_err(ScorerError::invalid_request)?;
        let prompt_tokens = prompt.split_whitespace().count();
        if prompt_tokens > self.config.max_context_tokens {
            return Err(ScorerError::WindowExceeded {
                context_tokens: prompt_tokens,
                target_tokens: 0,
                limit: self.config.max_context_tokens,
            });
        }
        let raw = if let Some(canned) = self.config.generations.get(prompt) {
            canned.clone()
        } else if let Some(rule) = self.config.generation_rules.iter().find(|r| prompt.contains(&r.contains)) {
            rule.output.clone()
        } else {
            vec![self.greedy_token.as_str(); params.max_new_tokens as usize].join(" ")
        };
        Ok(truncate_generation(&raw, params))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ScorerError> {
        self.counters.embed.fetch_add(1, Ordering::SeqCst);
        if text.is_empty() {
            return Err(ScorerError::invalid_request("empty text"));
        }
        if let Some(v) = self.config.embeddings.get(text) {
            return Ok(v.clone());
        }
        Ok(match self.config.embedding_rule {
            EmbeddingRule::Hash => self.hash_vector(text),
            EmbeddingRule::BagOfTokens => {
                let tokens: Vec<&str> = text.split_whitespace().collect();
                let mut acc = vec![0.0; self.config.embedding_dim];
                for tok in &tokens {
                    for (a, x) in acc.iter_mut().zip(self.hash_vector(tok)) {
                        *a += x;
                    }
                }
                let n = tokens.len().max(1) as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            }
        })
    }

    fn model_info(&self) -> Result<ModelInfo, ScorerError> {
        self.counters.info.fetch_add(1, Ordering::SeqCst);
        let policy = match self.config.attention {
            AttentionRule::None if self.config.attention_blocks.is_empty() => "none",
            AttentionRule::None => "mock:canned",
            AttentionRule::Uniform { .. } => "mock:uniform",
            AttentionRule::Salience { .. } => "mock:salience",
        };
        Ok(ModelInfo {
            model_id: self.config.model_id.clone(),
            tokenizer_id: self.config.tokenizer_id.clone(),
            attention_layer_policy: policy.into(),
            embedding_dim: self.config.embedding_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ab() -> MockConfig {
        MockConfig::from_unigram([("a", 0.8), ("b", 0.2)])
    }

    #[test]
    fn unigram_lookup() {
        let m = MockBackend::new(ab()).unwrap();
        let rec = m.score_target("", "a b a", false).unwrap();
        assert_eq!(rec.logprobs, vec![0.8f64.ln(), 0.2f64.ln(), 0.8f64.ln()]);
        assert!((rec.logprobs[0] - (-0.22314)).abs() < 1e-5);
        assert!((rec.logprobs[1] - (-1.60944)).abs() < 1e-5);
        assert!(rec.attention.is_none());
    }

    #[test]
    fn certain_token_scores_zero() {
        let m = MockBackend::new(MockConfig::from_unigram([("x", 1.0)])).unwrap();
        assert_eq!(m.score_target("ctx", "x", false).unwrap().logprobs, vec![0.0]);
    }

    #[test]
    fn config_probability_sum() {
        assert!(MockBackend::new(MockConfig::from_unigram([("a", 0.5), ("b", 0.5)])).is_ok());
        let err = MockBackend::new(MockConfig::from_unigram([("a", 0.5), ("b", 0.4)])).unwrap_err();
        assert!(matches!(err, ScorerError::InvalidConfig { .. }));
    }

    #[test]
    fn counts_calls() {
        let m = MockBackend::new(ab()).unwrap();
        for _ in 0..3 {
            m.score_target("", "a", false).unwrap();
        }
        assert_eq!(m.calls().score, 3);
        assert_eq!(m.calls().total(), 3);
        m.reset_calls();
        assert_eq!(m.calls().total(), 0);
    }

    #[test]
    fn canned_generation_and_stops() {
        let mut cfg = ab();
        cfg.generations.insert("p".into(), "r".into());
        cfg.generations.insert("q".into(), "x\ny".into());
        let m = MockBackend::new(cfg).unwrap();
        assert_eq!(m.generate("p", &GenParams::greedy(16, vec![])).unwrap(), "r");
        assert_eq!(m.generate("q", &GenParams::greedy(16, vec!["\n".into()])).unwrap(), "x");
        let a = m.generate("zzz", &GenParams::greedy(3, vec![])).unwrap();
        assert_eq!(a, "a a a");
        assert_eq!(m.generate("zzz", &GenParams::greedy(3, vec![])).unwrap(), a);
        assert!(m.generate("", &GenParams::greedy(3, vec![])).is_err());
    }

    #[test]
    fn generation_rules_by_substring() {
        let mut cfg = ab();
        cfg.generation_rules.push(GenerationRule { contains: "id-7".into(), output: "{score: 95}".into() });
        let m = MockBackend::new(cfg).unwrap();
        assert_eq!(m.generate("rate id-7 please", &GenParams::greedy(8, vec![])).unwrap(), "{score: 95}");
    }

    #[test]
    fn embeddings_deterministic_and_distinct() {
        let m = MockBackend::new(ab()).unwrap();
        assert_eq!(m.embed("hello").unwrap(), m.embed("hello").unwrap());
        assert_eq!(m.embed("hello").unwrap().len(), 8);
        let distinct: HashSet<Vec<u64>> = (0..100)
            .map(|i| m.embed(&format!("text number {i}")).unwrap().iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn info_is_stable() {
        let m = MockBackend::new(ab()).unwrap();
        let a = m.model_info().unwrap();
        assert_eq!(a.model_id, "mock-unigram-v1");
        assert_eq!(a, m.model_info().unwrap());
    }

    #[test]
    fn window_and_empty_target() {
        let mut cfg = ab();
        cfg.max_context_tokens = 3;
        let m = MockBackend::new(cfg).unwrap();
        assert_eq!(m.score_target("", "  ", false).unwrap_err(), ScorerError::EmptyTarget);
        assert_eq!(
            m.score_target("a a", "b b", false).unwrap_err(),
            ScorerError::WindowExceeded { context_tokens: 2, target_tokens: 2, limit: 3 }
        );
    }

    #[test]
    fn attention_rules() {
        let mut cfg = ab();
        cfg.attention = AttentionRule::Salience { salience: [("b".to_string(), 3.0)].into(), default_salience: 1.0 };
        cfg.attention_blocks.insert("b b".into(), vec![vec![], vec![0.25]]);
        let m = MockBackend::new(cfg).unwrap();
        let att = m.score_target("", "a b a", true).unwrap().attention.unwrap();
        assert_eq!(att.weight(1, 0), 1.0);
        assert_eq!(att.weight(2, 1), 1.5);
        assert_eq!(att.weight(2, 0), 0.5);
        let canned = m.score_target("", "b b", true).unwrap().attention.unwrap();
        assert_eq!(canned.weight(1, 0), 0.25);
        assert!(m.score_target("", "a b", false).unwrap().attention.is_none());
    }
}
