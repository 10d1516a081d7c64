//! Instruction-tuning corpus ingestion.
//!
//! Input is line-delimited JSON, one record per line:
//!
//! ```text
//! {"id": "s1", "instruction": "...", "response": "...",
//!  "history": [{"user": "...", "assistant": "..."}], "meta": {"source": "..."}}
//! ```
//!
//! `history` and `meta` are optional. Unknown top-level keys are kept in
//! `meta` under a `_raw.` prefix with their JSON text as the value.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Prefix applied to unknown record keys when they are folded into `meta`.
pub const RAW_META_PREFIX: &str = "_raw.";

/// Upper edges (exclusive, in chars) of the length histogram buckets; the
/// final bucket is open-ended.
pub const LENGTH_BUCKET_EDGES: [usize; 9] = [16, 32, 64, 128, 256, 512, 1024, 2048, 4096];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub assistant: String,
}

/// One instruction/response pair, optionally preceded by dialogue turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<Turn>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            response: response.into(),
            history: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_history(mut self, history: Vec<Turn>) -> Self {
        self.history = history;
        self
    }

    pub fn is_multi_turn(&self) -> bool {
        !self.history.is_empty()
    }

    /// Serializes back to the corpus line format (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }

    /// Parses and validates one corpus line.
    pub fn from_line(line: &str) -> Result<Self, String> {
        let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
        let Value::Object(map) = value else {
            return Err("record is not an object".into());
        };
        Self::from_object(map)
    }

    fn from_object(mut map: Map<String, Value>) -> Result<Self, String> {
        let id = take_string(&mut map, "id")?;
        let instruction = take_string(&mut map, "instruction")?.trim().to_string();
        let response = take_string(&mut map, "response")?.trim().to_string();

        let history = match map.remove("history") {
            None | Some(Value::Null) => Vec::new(),
            Some(v) => serde_json::from_value::<Vec<Turn>>(v)
                .map_err(|e| format!("field \"history\": {e}"))?,
        };

        let mut meta = match map.remove("meta") {
            None | Some(Value::Null) => BTreeMap::new(),
            Some(v) => serde_json::from_value::<BTreeMap<String, String>>(v)
                .map_err(|e| format!("field \"meta\": {e}"))?,
        };
        for (key, value) in map {
            meta.insert(format!("{RAW_META_PREFIX}{key}"), value.to_string());
        }

        let sample = Self { id, instruction, response, history, meta };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.instruction.trim().is_empty() {
            return Err("empty instruction".into());
        }
        if self.response.trim().is_empty() {
            return Err("empty response".into());
        }
        for (i, turn) in self.history.iter().enumerate() {
            if turn.user.trim().is_empty() || turn.assistant.trim().is_empty() {
                return Err(format!("history turn {i} has empty text"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the scored content (instruction, response, history).
    /// Ids and meta do not participate.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(self.instruction.as_bytes());
        field(self.response.as_bytes());
        for turn in &self.history {
            field(turn.user.as_bytes());
            field(turn.assistant.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn take_string(map: &mut Map<String, Value>, key: &str) -> Result<String, String> {
    match map.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(format!("field {key:?} must be a string, got {other}")),
        None => Err(format!("missing field {key:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnError {
    #[default]
    FailFast,
    SkipAndCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub edges: Vec<usize>,
    pub counts: Vec<u64>,
}

impl Default for LengthHistogram {
    fn default() -> Self {
        Self {
            edges: LENGTH_BUCKET_EDGES.to_vec(),
            counts: vec![0; LENGTH_BUCKET_EDGES.len() + 1],
        }
    }
}

impl LengthHistogram {
    pub fn record(&mut self, len: usize) {
        let bucket = self.edges.iter().position(|&e| len < e).unwrap_or(self.edges.len());
        self.counts[bucket] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Accepted records.
    pub count: u64,
    /// Lines rejected for schema or validation errors (duplicates included).
    pub rejected: u64,
    pub duplicate_id_count: u64,
    pub multi_turn_count: u64,
    pub instruction_length_histogram: LengthHistogram,
    pub response_length_histogram: LengthHistogram,
}

/// Streaming, single-pass corpus reader. Yields accepted samples in file
/// order; statistics are complete once the iterator is exhausted.
pub struct CorpusReader {
    lines: Lines<BufReader<File>>,
    path: PathBuf,
    policy: OnError,
    line_no: usize,
    seen: HashSet<String>,
    stats: CorpusStats,
    failed: bool,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>, policy: OnError) -> Result<Self, CorpusError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
        Ok(Self {
            lines: BufReader::new(file).lines(),
            path,
            policy,
            line_no: 0,
            seen: HashSet::new(),
            stats: CorpusStats::default(),
            failed: false,
        })
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn into_stats(self) -> CorpusStats {
        self.stats
    }

    fn reject(&mut self, err: CorpusError) -> Option<Result<Sample, CorpusError>> {
        self.stats.rejected += 1;
        match self.policy {
            OnError::FailFast => {
                self.failed = true;
                Some(Err(err))
            }
            OnError::SkipAndCount => None,
        }
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Sample, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(source) => {
                    self.failed = true;
                    return Some(Err(CorpusError::Io { path: self.path.clone(), source }));
                }
            };
            self.line_no += 1;
            let line_no = self.line_no;
            if line.trim().is_empty() {
                continue;
            }
            let sample = match Sample::from_line(&line) {
                Ok(s) => s,
                Err(reason) => match self.reject(CorpusError::Malformed { line: line_no, reason }) {
                    Some(err) => return Some(err),
                    None => continue,
                },
            };
            if !self.seen.insert(sample.id.clone()) {
                self.stats.duplicate_id_count += 1;
                let err = CorpusError::DuplicateId { line: line_no, id: sample.id };
                match self.reject(err) {
                    Some(err) => return Some(err),
                    None => continue,
                }
            }
            self.stats.count += 1;
            if sample.is_multi_turn() {
                self.stats.multi_turn_count += 1;
            }
            self.stats.instruction_length_histogram.record(sample.instruction.chars().count());
            self.stats.response_length_histogram.record(sample.response.chars().count());
            return Some(Ok(sample));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub stats: CorpusStats,
}

/// Reads a whole corpus into memory.
pub fn load_corpus(path: impl AsRef<Path>, policy: OnError) -> Result<Corpus, CorpusError> {
    let mut reader = CorpusReader::open(path, policy)?;
    let samples = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus { samples, stats: reader.into_stats() })
}

/// Role markers used to linearize a dialogue into a single prompt.
///
/// `turn` is rendered once per history turn with `{u}` and `{a}` substituted;
/// `query` is rendered last with `{q}` substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub turn: String,
    pub query: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { turn: "{u}\n{a}\n".into(), query: "{q}".into() }
    }
}

impl PromptTemplate {
    pub fn new(turn: impl Into<String>, query: impl Into<String>) -> Self {
        Self { turn: turn.into(), query: query.into() }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.turn.len() as u64).to_le_bytes());
        h.update(self.turn.as_bytes());
        h.update((self.query.len() as u64).to_le_bytes());
        h.update(self.query.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Renders history turns in order, then the instruction.
pub fn flatten_prompt(sample: &Sample, template: &PromptTemplate) -> String {
    let mut out = String::new();
    for turn in &sample.history {
        substitute_into(&mut out, &template.turn, &[('u', &turn.user), ('a', &turn.assistant)]);
    }
    substitute_into(&mut out, &template.query, &[('q', &sample.instruction)]);
    out
}

/// Single-pass `{x}` placeholder substitution. Substituted text is never
/// rescanned, so values containing `{a}` etc. are emitted verbatim.
pub(crate) fn substitute_into(out: &mut String, template: &str, vars: &[(char, &str)]) {
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let mut chars = tail.chars();
        chars.next();
        let replaced = match (chars.next(), chars.next()) {
            (Some(name), Some('}')) => vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v),
            _ => None,
        };
        match replaced {
            Some(v) => {
                out.push_str(v);
                rest = &tail[3..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
}
