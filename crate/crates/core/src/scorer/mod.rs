//! Token-scoring backend protocol.
//!
//! A backend scores target spans (per-token natural-log probabilities plus an
//! optional attention block), generates greedy continuations, embeds text and
//! reports its identity. [`MockBackend`] implements the protocol in-process
//! from a config table; [`HttpScorer`] talks to any backend over HTTP.

pub mod http;
pub mod mock;
pub mod wire;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{serve, HttpScorer, ServerHandle};
pub use mock::{CallCounts, MockBackend, MockConfig};
pub use wire::{AttentionBlock, GenParams, ModelInfo, TokenScoreRecord};

/// Hard ceiling on `max_new_tokens` accepted by [`GenParams::validate`].
pub const MAX_NEW_TOKENS_CEILING: u32 = 8192;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerError {
    #[error("backend unreachable: {message}")]
    Unreachable { message: String },
    #[error("input exceeds backend window: {context_tokens} context + {target_tokens} target tokens > {limit}")]
    WindowExceeded { context_tokens: usize, target_tokens: usize, limit: usize },
    #[error("target tokenizes to zero tokens")]
    EmptyTarget,
    #[error("invalid request: {message}")]
    InvalidRequest { message: String },
    #[error("protocol error: {message}")]
    Protocol { message: String },
    #[error("invalid backend config: {message}")]
    InvalidConfig { message: String },
    #[error("backend error: {message}")]
    Backend { message: String },
}

impl ScorerError {
    pub fn protocol(message: impl Into<String>) -> Self {
        Self::Protocol { message: message.into() }
    }

    pub fn unreachable(message: impl Into<String>) -> Self {
        Self::Unreachable { message: message.into() }
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        Self::InvalidRequest { message: message.into() }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Unreachable { .. })
    }
}

/// Anything that implements the scoring protocol.
pub trait ScorerBackend: Send + Sync {
    /// Scores `target` conditioned on `context` (teacher forcing).
    fn score_target(&self, context: &str, target: &str, want_attention: bool) -> Result<TokenScoreRecord, ScorerError>;

    /// Greedy continuation of `prompt`.
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScorerError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, ScorerError>;

    fn model_info(&self) -> Result<ModelInfo, ScorerError>;
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for Arc<B> {
    fn score_target(&self, context: &str, target: &str, want_attention: bool) -> Result<TokenScoreRecord, ScorerError> {
        (**self).score_target(context, target, want_attention)
    }
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScorerError> {
        (**self).generate(prompt, params)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, ScorerError> {
        (**self).embed(text)
    }
    fn model_info(&self) -> Result<ModelInfo, ScorerError> {
        (**self).model_info()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts after the first failure.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, backoff_ms: 200 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, backoff_ms: 0 }
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ScorerError>) -> Result<T, ScorerError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    if self.backoff_ms > 0 {
                        thread::sleep(Duration::from_millis(self.backoff_ms * u64::from(attempt)));
                    }
                }
                other => return other,
            }
        }
    }
}

/// Wraps a backend and retries transient (unreachable) failures.
pub struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: ScorerBackend> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<B: ScorerBackend> ScorerBackend for Retrying<B> {
    fn score_target(&self, context: &str, target: &str, want_attention: bool) -> Result<TokenScoreRecord, ScorerError> {
        self.policy.run(|| self.inner.score_target(context, target, want_attention))
    }
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScorerError> {
        self.policy.run(|| self.inner.generate(prompt, params))
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, ScorerError> {
        self.policy.run(|| self.inner.embed(text))
    }
    fn model_info(&self) -> Result<ModelInfo, ScorerError> {
        self.policy.run(|| self.inner.model_info())
    }
}

/// Cuts `text` at the first stop sequence and after `max_new_tokens`
/// whitespace-delimited tokens, whichever comes first. Bytes before the cut
/// are preserved exactly.
pub fn truncate_generation(text: &str, params: &GenParams) -> String {
    let mut end = text.len();
    for stop in params.stop_sequences.iter().filter(|s| !s.is_empty()) {
        if let Some(pos) = text.find(stop.as_str()) {
            end = end.min(pos);
        }
    }
    let mut tokens = 0u32;
    let mut in_token = false;
    for (pos, ch) in text.char_indices() {
        if pos >= end {
            break;
        }
        if ch.is_whitespace() {
            if in_token {
                in_token = false;
                tokens += 1;
                if tokens == params.max_new_tokens {
                    end = pos;
                    break;
                }
            }
        } else {
            in_token = true;
        }
    }
    text[..end].to_string()
}
