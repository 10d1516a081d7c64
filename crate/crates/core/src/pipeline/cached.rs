use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::cache::{Cache, CacheKey};
use crate::scorer::{GenParams, ModelInfo, ScorerBackend, ScorerError, TokenScoreRecord};

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Stored<T> {
    Ok(T),
    Err(ScorerError),
}

fn is_deterministic(e: &ScorerError) -> bool {
    matches!(e, ScorerError::EmptyTarget | ScorerError::WindowExceeded { .. })
}

/// Request-level cache in front of a backend. Keys cover the model id, the
/// operation and the full request, so any change in prompt text, template
/// or generation parameters is a different key. Deterministic failures are
/// cached as well; transient ones never are.
pub struct CachedBackend<'a> {
    inner: &'a dyn ScorerBackend,
    cache: &'a Cache,
    model_id: String,
    endpoint: String,
}

impl<'a> CachedBackend<'a> {
    /// `endpoint` identifies the backend instance for the model-info entry.
    pub fn new(inner: &'a dyn ScorerBackend, cache: &'a Cache, endpoint: impl Into<String>) -> Result<Self, ScorerError> {
        let endpoint = endpoint.into();
        let key = CacheKey::from_parts(&["info", &endpoint]);
        let info = match cache.get_json::<ModelInfo>(&key) {
            Some(info) => info,
            None => {
                let info = inner.model_info()?;
                put(cache, &key, &info);
                info
            }
        };
        Ok(Self { inner, cache, model_id: info.model_id, endpoint })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    fn cached<T: Serialize + DeserializeOwned>(
        &self,
        parts: &[&str],
        call: impl FnOnce() -> Result<T, ScorerError>,
    ) -> Result<T, ScorerError> {
        let mut full = vec![self.model_id.as_str()];
        full.extend_from_slice(parts);
        let key = CacheKey::from_parts(&full);
        if let Some(stored) = self.cache.get_json::<Stored<T>>(&key) {
            return match stored {
                Stored::Ok(v) => Ok(v),
                Stored::Err(e) => Err(e),
            };
        }
        match call() {
            Ok(v) => {
                put(self.cache, &key, &Stored::Ok(&v));
                Ok(v)
            }
            Err(e) if is_deterministic(&e) => {
                put(self.cache, &key, &Stored::<T>::Err(e.clone()));
                Err(e)
            }
            Err(e) => Err(e),
        }
    }
}

fn put<T: Serialize>(cache: &Cache, key: &CacheKey, value: &T) {
    if let Err(e) = cache.put_json(key, value) {
        log::warn!("cache write failed: {e}");
    }
}

impl ScorerBackend for CachedBackend<'_> {
    fn score_target(&self, context: &str, target: &str, want_attention: bool) -> Result<TokenScoreRecord, ScorerError> {
        let flag = if want_attention { "attn" } else { "plain" };
        self.cached(&["score", flag, context, target], || self.inner.score_target(context, target, want_attention))
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScorerError> {
        let params_json = serde_json::to_string(params).expect("params serialize");
        self.cached(&["generate", &params_json, prompt], || self.inner.generate(prompt, params))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ScorerError> {
        self.cached(&["embed", text], || self.inner.embed(text))
    }

    fn model_info(&self) -> Result<ModelInfo, ScorerError> {
        let key = CacheKey::from_parts(&["info", &self.endpoint]);
        match self.cache.get_json(&key) {
            Some(info) => Ok(info),
            None => self.inner.model_info(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{MockBackend, MockConfig};

    fn mock() -> MockBackend {
        MockBackend::new(MockConfig::from_unigram([("a", 0.3), ("b", 0.7)])).unwrap()
    }

    #[test]
    fn replays_without_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::open(dir.path()).unwrap();
        let m = mock();
        let c = CachedBackend::new(&m, &cache, "mock").unwrap();
        let r1 = c.score_target("a", "a b a", false).unwrap();
        let g1 = c.generate("a", &GenParams::greedy(3, vec![])).unwrap();
        let e1 = c.embed("a b").unwrap();
        assert_eq!(c.score_target("", "", false), Err(ScorerError::EmptyTarget));
        let before = m.calls();

        let c2 = CachedBackend::new(&m, &cache, "mock").unwrap();
        let r2 = c2.score_target("a", "a b a", false).unwrap();
        assert_eq!(r1.logprobs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), r2.logprobs.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(c2.generate("a", &GenParams::greedy(3, vec![])).unwrap(), g1);
        assert_eq!(c2.embed("a b").unwrap(), e1);
        assert_eq!(c2.score_target("", "", false), Err(ScorerError::EmptyTarget));
        assert_eq!(c2.model_info().unwrap().model_id, "mock-unigram-v1");
        assert_eq!(m.calls(), before);

        c2.generate("a", &GenParams::greedy(4, vec![])).unwrap();
        assert_eq!(m.calls().generate, before.generate + 1);
    }
}
