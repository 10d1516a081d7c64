//! Wire messages and codec.
//!
//! Every message is one JSON object followed by `\n`. Log-probabilities and
//! attention weights are written with 17 significant digits so decoding
//! reproduces the sender's `f64` bit pattern. Decoding validates each
//! message: non-finite numbers, positive log-probabilities, length
//! mismatches and attention entries on or above the diagonal are rejected.

use serde::de::DeserializeOwned;
use serde::ser::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use super::{ScorerError, MAX_NEW_TOKENS_CEILING};

/// Writes `x` as a decimal with 17 significant digits.
fn exact_decimal(x: f64) -> Result<Box<RawValue>, String> {
    if !x.is_finite() {
        return Err(format!("non-finite value {x}"));
    }
    RawValue::from_string(format!("{x:.16e}")).map_err(|e| e.to_string())
}

fn ser_exact_vec<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let raw = values.iter().map(|&x| exact_decimal(x)).collect::<Result<Vec<_>, _>>().map_err(S::Error::custom)?;
    raw.serialize(s)
}

fn ser_exact_rows<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    let raw = rows
        .iter()
        .map(|row| row.iter().map(|&x| exact_decimal(x)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(S::Error::custom)?;
    raw.serialize(s)
}

/// Strictly lower-triangular attention over the target span.
///
/// `rows[j]` holds the weights token `j` assigns to tokens `0..j`, so row `j`
/// has exactly `j` entries and row 0 is empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionBlock {
    n: usize,
    #[serde(serialize_with = "ser_exact_rows")]
    rows: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawAttentionBlock {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl<'de> Deserialize<'de> for AttentionBlock {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawAttentionBlock::deserialize(d)?;
        if raw.rows.len() != raw.n {
            return Err(serde::de::Error::custom(format!(
                "attention block declares n={} but has {} rows",
                raw.n,
                raw.rows.len()
            )));
        }
        Self::new(raw.rows).map_err(serde::de::Error::custom)
    }
}

impl AttentionBlock {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, String> {
        let n = rows.len();
        if n == 0 {
            return Err("attention block must cover at least one token".into());
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != j {
                return Err(format!(
                    "attention row {j} has {} entries; strictly lower-triangular rows have exactly {j}",
                    row.len()
                ));
            }
            for (i, &w) in row.iter().enumerate() {
                if !w.is_finite() || w < 0.0 {
                    return Err(format!("attention weight [{j}][{i}] = {w} is not a finite non-negative number"));
                }
            }
        }
        Ok(Self { n, rows })
    }

    /// Builds a block from `weight(j, i)` evaluated for every `i < j`.
    pub fn from_fn(n: usize, weight: impl Fn(usize, usize) -> f64) -> Result<Self, String> {
        Self::new((0..n).map(|j| (0..j).map(|i| weight(j, i)).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Weight paid by token `j` to earlier token `i`; zero when `i >= j`.
    pub fn weight(&self, j: usize, i: usize) -> f64 {
        if i < j {
            self.rows[j][i]
        } else {
            0.0
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreRecord {
    pub target_tokens: Vec<String>,
    #[serde(serialize_with = "ser_exact_vec")]
    pub logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionBlock>,
}

impl TokenScoreRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.target_tokens.is_empty() {
            return Err("score record has no target tokens".into());
        }
        if self.logprobs.len() != self.target_tokens.len() {
            return Err(format!(
                "{} logprobs for {} target tokens",
                self.logprobs.len(),
                self.target_tokens.len()
            ));
        }
        if let Some(bad) = self.logprobs.iter().position(|lp| !lp.is_finite() || *lp > 0.0) {
            return Err(format!("logprob[{bad}] = {} is not a finite value <= 0", self.logprobs[bad]));
        }
        if let Some(att) = &self.attention {
            if att.n() != self.target_tokens.len() {
                return Err(format!(
                    "attention block dimension {} != {} target tokens",
                    att.n(),
                    self.target_tokens.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_new_tokens: u32,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl GenParams {
    pub fn greedy(max_new_tokens: u32, stop_sequences: Vec<String>) -> Self {
        Self { max_new_tokens, decoding: Decoding::Greedy, stop_sequences }
    }

    pub fn validate(&self, ceiling: u32) -> Result<(), String> {
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        if self.max_new_tokens > ceiling.min(MAX_NEW_TOKENS_CEILING) {
            return Err(format!("max_new_tokens {} exceeds ceiling {ceiling}", self.max_new_tokens));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub tokenizer_id: String,
    pub attention_layer_policy: String,
    pub embedding_dim: usize,
}

/// Implemented by every message carried on the wire.
pub trait WireMessage: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context: String,
    pub target: String,
    #[serde(default)]
    pub want_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    #[serde(serialize_with = "ser_exact_vec")]
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ScorerError,
}

impl WireMessage for ScoreRequest {}
impl WireMessage for GenerateRequest {
    fn check(&self) -> Result<(), String> {
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}
impl WireMessage for GenerateResponse {}
impl WireMessage for EmbedRequest {}
impl WireMessage for ErrorResponse {}

impl WireMessage for TokenScoreRecord {
    fn check(&self) -> Result<(), String> {
        self.validate()
    }
}

impl WireMessage for EmbedResponse {
    fn check(&self) -> Result<(), String> {
        if self.embedding.iter().any(|x| !x.is_finite()) {
            return Err("embedding contains a non-finite value".into());
        }
        Ok(())
    }
}

impl WireMessage for ModelInfo {
    fn check(&self) -> Result<(), String> {
        if self.model_id.is_empty() {
            return Err("empty model_id".into());
        }
        if self.embedding_dim == 0 {
            return Err("embedding_dim must be positive".into());
        }
        Ok(())
    }
}

impl GenerateRequest {
    pub fn from_params(prompt: &str, params: &GenParams) -> Self {
        Self { prompt: prompt.to_string(), max_new_tokens: params.max_new_tokens, stop: params.stop_sequences.clone() }
    }

    pub fn params(&self) -> GenParams {
        GenParams::greedy(self.max_new_tokens, self.stop.clone())
    }
}

/// Encodes one message as a single line terminated by `\n`.
pub fn encode<T: WireMessage>(msg: &T) -> Result<String, ScorerError> {
    msg.check().map_err(ScorerError::protocol)?;
    let mut line = serde_json::to_string(msg).map_err(|e| ScorerError::protocol(e.to_string()))?;
    line.push('\n');
    Ok(line)
}

/// Decodes and validates one message. Trailing whitespace (the line
/// terminator) is accepted; anything else after the object is not.
pub fn decode<T: WireMessage>(body: &str) -> Result<T, ScorerError> {
    let msg: T = serde_json::from_str(body.trim_end()).map_err(|e| ScorerError::protocol(e.to_string()))?;
    msg.check().map_err(ScorerError::protocol)?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block4() -> AttentionBlock {
        AttentionBlock::new(vec![vec![], vec![0.5], vec![0.125, 0.3333333333333333], vec![0.1, 0.2, 0.30000000000000004]])
            .unwrap()
    }

    #[test]
    fn logprobs_have_17_significant_digits() {
        let rec = TokenScoreRecord { target_tokens: vec!["a".into()], logprobs: vec![0.8f64.ln()], attention: None };
        let line = encode(&rec).unwrap();
        assert!(line.ends_with('\n'));
        assert!(line.contains("-2.2314355131420971e-1"), "{line}");
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["logprobs"][0].as_f64().unwrap().to_bits(), 0.8f64.ln().to_bits());
    }

    #[test]
    fn attention_fixture_round_trips_bitwise() {
        let rec = TokenScoreRecord {
            target_tokens: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            logprobs: vec![-0.1, -0.2, -0.3, -0.4],
            attention: Some(block4()),
        };
        let line = encode(&rec).unwrap();
        let back: TokenScoreRecord = decode(&line).unwrap();
        let a = rec.attention.as_ref().unwrap().rows();
        let b = back.attention.as_ref().unwrap().rows();
        for (ra, rb) in a.iter().zip(b) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(encode(&back).unwrap(), line);
    }

    #[test]
    fn upper_triangle_rejected_at_decode() {
        let body = r#"{"target_tokens":["a","b"],"logprobs":[-0.1,-0.2],"attention":{"n":2,"rows":[[0.1],[0.5]]}}"#;
        assert!(matches!(decode::<TokenScoreRecord>(body), Err(ScorerError::Protocol { .. })));
        let body = r#"{"target_tokens":["a","b"],"logprobs":[-0.1,-0.2],"attention":{"n":2,"rows":[[],[0.5,0.1]]}}"#;
        assert!(decode::<TokenScoreRecord>(body).is_err());
    }

    #[test]
    fn invalid_records_rejected() {
        for body in [
            r#"{"target_tokens":["a"],"logprobs":[0.1]}"#,
            r#"{"target_tokens":["a","b"],"logprobs":[-0.1]}"#,
            r#"{"target_tokens":[],"logprobs":[]}"#,
            r#"{"target_tokens":["a"],"logprobs":[-1e999]}"#,
            r#"{"target_tokens":["a"],"logprobs":[NaN]}"#,
            r#"{"target_tokens":["a","b"],"logprobs":[-0.1,-0.2],"attention":{"n":1,"rows":[[]]}}"#,
            r#"{"target_tokens":["a","b"],"logprobs":[-0.1,-0.2],"attention":{"n":2,"rows":[[],[-0.5]]}}"#,
        ] {
            assert!(decode::<TokenScoreRecord>(body).is_err(), "{body}");
        }
    }

    #[test]
    fn non_finite_rejected_at_encode() {
        let rec = TokenScoreRecord { target_tokens: vec!["a".into()], logprobs: vec![f64::NEG_INFINITY], attention: None };
        assert!(encode(&rec).is_err());
        let emb = EmbedResponse { embedding: vec![f64::NAN] };
        assert!(encode(&emb).is_err());
    }

    #[test]
    fn error_response_round_trip() {
        let e = ErrorResponse { error: ScorerError::WindowExceeded { context_tokens: 10, target_tokens: 5, limit: 12 } };
        let back: ErrorResponse = decode(&encode(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn gen_params_ceiling() {
        assert!(GenParams::greedy(0, vec![]).validate(100).is_err());
        assert!(GenParams::greedy(101, vec![]).validate(100).is_err());
        assert!(GenParams::greedy(100, vec![]).validate(100).is_ok());
    }

    proptest! {
        #[test]
        fn score_record_codec_identity(
            lps in prop::collection::vec(-50.0f64..=0.0, 1..20),
            w in prop::collection::vec(0.0f64..2.0, 200),
            with_att in any::<bool>(),
        ) {
            let n = lps.len();
            let attention = with_att.then(|| AttentionBlock::from_fn(n, |j, i| w[(j * 13 + i) % w.len()]).unwrap());
            let rec = TokenScoreRecord {
                target_tokens: (0..n).map(|i| format!("t{i}")).collect(),
                logprobs: lps,
                attention,
            };
            let back: TokenScoreRecord = decode(&encode(&rec).unwrap()).unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn embed_and_info_codec_identity(v in prop::collection::vec(-1e6f64..1e6, 1..32), id in "[a-z0-9-]{1,20}") {
            let e = EmbedResponse { embedding: v };
            prop_assert_eq!(decode::<EmbedResponse>(&encode(&e).unwrap()).unwrap(), e);
            let info = ModelInfo { model_id: id, tokenizer_id: "ws".into(), attention_layer_policy: "p".into(), embedding_dim: 3 };
            prop_assert_eq!(decode::<ModelInfo>(&encode(&info).unwrap()).unwrap(), info);
            let g = GenerateRequest { prompt: "p".into(), max_new_tokens: 3, stop: vec!["\n".into()] };
            prop_assert_eq!(decode::<GenerateRequest>(&encode(&g).unwrap()).unwrap(), g);
        }
    }
}
