//! End-to-end selection: quality filter, difficulty scoring, percentile
//! bands, k-center. Every backend result goes through the on-disk cache, so
//! an interrupted run resumes by simply running again.

pub mod cache;
pub mod cached;
pub mod config;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_corpus, CorpusError, CorpusStats, Sample};
use crate::difficulty::{compute_vector, DifficultyError, DifficultyVector};
use crate::parallel::ordered_map;
use crate::quality::{assess_quality, stage1_filter_with, QualityError, QualityResult, QualityTemplate, Stage1Outcome};
use crate::report::{summarize_vectors, DifficultySnapshot, SnapshotSummary};
use crate::scorer::{HttpScorer, MockBackend, MockConfig, ModelInfo, Retrying, ScorerBackend, ScorerError};
use crate::selection::{band_filter, kcenter_select, SelectionError, Thresholds};

pub use cache::{Cache, CacheError, CacheKey, CacheStats};
pub use cached::CachedBackend;
pub use config::{BandMode, ConfigError, PipelineConfig, StartRule};
pub use manifest::{Manifest, ManifestCounts, PolicyFlags, TemplateHashes, TOOL_NAME, TOOL_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SELECTED_FILE: &str = "selected.jsonl";
pub const STAGE1_FILE: &str = "stage1.jsonl";
pub const DIFFICULTY_FILE: &str = "difficulty.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const SWEEP_FILE: &str = "sweep.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Difficulty,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    BackendUnreachable,
    EmptySelection,
    Other,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Template(QualityError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("backend failure during {stage:?}{}: {source}", sample_id.as_ref().map(|s| format!(" (sample {s})")).unwrap_or_default())]
    Backend { stage: Stage, sample_id: Option<String>, source: ScorerError },
    #[error("difficulty scoring failed for sample {sample_id}: {source}")]
    Difficulty { sample_id: String, source: DifficultyError },
    #[error("stage 1 retained no samples (delta {delta}: {below} below threshold, {parse_failed} unparseable, {backend_failed} backend failures)")]
    EmptyStage1 { delta: u32, below: u64, parse_failed: u64, backend_failed: u64 },
    #[error("no stage-1 survivor could be scored ({unscoreable} un-scoreable)")]
    NothingScoreable { unscoreable: u64 },
    #[error("{}", empty_mid_message(.population, .thresholds, .summary))]
    EmptyMid { population: usize, thresholds: Box<Thresholds>, summary: Box<SnapshotSummary> },
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("halted after {0:?}")]
    Halted(Stage),
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
}

fn empty_mid_message(population: &usize, t: &Thresholds, s: &SnapshotSummary) -> String {
    let line = |name: &str, th: &crate::selection::MetricThreshold, m: &crate::report::MetricSummary| {
        format!(
            "\n  {name}: band [{}, {}] -> [{:.6}, {:.6}]; distribution min {:.6} median {:.6} max {:.6}",
            th.p_low, th.p_high, th.tau_low, th.tau_high, m.min, m.median, m.max
        )
    };
    format!(
        "no sample lies inside every band ({population} scored); widen the bands{}{}{}",
        line("d1", &t.d1, &s.d1),
        line("d2", &t.d2, &s.d2),
        line("d3", &t.d3, &s.d3)
    )
}

impl PipelineError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            PipelineError::Config(_) | PipelineError::Template(_) => ErrorCategory::Config,
            PipelineError::Corpus(CorpusError::Io { .. }) => ErrorCategory::Config,
            PipelineError::Backend { source, .. } | PipelineError::Difficulty { source: DifficultyError::Scorer(source), .. }
                if source.is_retryable() =>
            {
                ErrorCategory::BackendUnreachable
            }
            PipelineError::EmptyStage1 { .. } | PipelineError::NothingScoreable { .. } | PipelineError::EmptyMid { .. } => {
                ErrorCategory::EmptySelection
            }
            _ => ErrorCategory::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop (as if killed) once this stage's results are cached.
    pub halt_after: Option<Stage>,
}

impl RunOptions {
    fn check(&self, stage: Stage) -> Result<(), PipelineError> {
        match self.halt_after {
            Some(s) if s == stage => Err(PipelineError::Halted(stage)),
            _ => Ok(()),
        }
    }
}

/// A backend built from `config.backend`, plus the identity used for its
/// cached model info.
pub struct Connection {
    pub backend: Arc<dyn ScorerBackend>,
    pub endpoint: String,
}

pub fn connect(config: &PipelineConfig) -> Result<Connection, PipelineError> {
    if let Some(path) = config.backend.strip_prefix("mock:") {
        let mock = MockConfig::load(path)
            .and_then(MockBackend::new)
            .map_err(|e| ConfigError::Invalid(format!("mock backend {path}: {e}")))?;
        let endpoint = format!("mock:{}", mock.config().digest());
        return Ok(Connection { backend: Arc::new(mock), endpoint });
    }
    let http = HttpScorer::new(&config.backend, Duration::from_secs(config.backend_timeout_secs));
    Ok(Connection { backend: Arc::new(Retrying::new(http, config.retry)), endpoint: config.backend.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct DifficultyRow<'a> {
    id: &'a str,
    d1: f64,
    d2: f64,
    d3: f64,
    atten_d2: Option<f64>,
    atten_d3: Option<f64>,
}

/// Results shared by `run`, `sweep` and `score`.
struct Prepared {
    model: ModelInfo,
    corpus_sha256: String,
    corpus_stats: CorpusStats,
    quality_template: QualityTemplate,
    stage1: Option<Stage1Outcome>,
    scored: Vec<(Sample, DifficultyVector)>,
    unscoreable: Vec<String>,
}

impl Prepared {
    fn snapshot(&self, label: &str) -> DifficultySnapshot {
        DifficultySnapshot {
            model_id: self.model.model_id.clone(),
            label: label.to_string(),
            timestamp: None,
            samples: self.scored.iter().map(|(s, v)| (s.id.clone(), v.clone())).collect(),
        }
    }

    fn write_tables(&self, dir: &Path, label: &str) -> Result<(), PipelineError> {
        let rows: Vec<DifficultyRow> = self
            .scored
            .iter()
            .map(|(s, v)| DifficultyRow { id: &s.id, d1: v.d1, d2: v.d2, d3: v.d3, atten_d2: v.atten_d2, atten_d3: v.atten_d3 })
            .collect();
        write_file(&dir.join(DIFFICULTY_FILE), &jsonl(&rows))?;
        let snapshot = serde_json::to_string_pretty(&self.snapshot(label)).expect("snapshot serializes") + "\n";
        write_file(&dir.join(SNAPSHOT_FILE), &snapshot)
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let out = |source| PipelineError::Output { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(out)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(out)?;
    fs::rename(&tmp, path).map_err(out)
}

fn stage1(
    samples: &[Sample],
    config: &PipelineConfig,
    backend: &dyn ScorerBackend,
    cache: &Cache,
    model_id: &str,
    template: &QualityTemplate,
) -> Result<Stage1Outcome, PipelineError> {
    let settings = config.stage1_settings();
    let params = serde_json::to_string(&settings.params).expect("params serialize");
    let retries = settings.parse_retries.to_string();
    let outcome = stage1_filter_with(samples, settings.delta, config.concurrency, |s| {
        let key = CacheKey::from_parts(&["quality", model_id, template.hash(), &s.id, &s.content_hash(), &params, &retries]);
        if let Some(hit) = cache.get_json::<QualityResult>(&key) {
            return Ok(hit);
        }
        let result = assess_quality(s, backend, template, &settings)?;
        if let Err(e) = cache.put_json(&key, &result) {
            log::warn!("cache write failed: {e}");
        }
        Ok(result)
    });
    outcome.map_err(|e| match e {
        QualityError::Backend { sample_id, source } => PipelineError::Backend { stage: Stage::Stage1, sample_id: Some(sample_id), source },
        other => PipelineError::Template(other),
    })
}

enum Scoring {
    Scored(DifficultyVector),
    Unscoreable(String),
}

fn score_difficulties(
    samples: &[Sample],
    config: &PipelineConfig,
    backend: &dyn ScorerBackend,
) -> Result<(Vec<(Sample, DifficultyVector)>, Vec<String>), PipelineError> {
    let template = config.prompt_template();
    let params = config.difficulty_params();
    let mode = config.difficulty.aggregation;
    let outcomes = ordered_map(samples, config.concurrency, |s| match compute_vector(s, backend, &template, &params, mode) {
        Ok(v) => Ok(Scoring::Scored(v)),
        Err(DifficultyError::Unscoreable { reason, .. }) => Ok(Scoring::Unscoreable(reason)),
        Err(DifficultyError::Scorer(e @ (ScorerError::EmptyTarget | ScorerError::WindowExceeded { .. }))) => {
            Ok(Scoring::Unscoreable(e.to_string()))
        }
        Err(source) => Err(PipelineError::Difficulty { sample_id: s.id.clone(), source }),
    });
    let mut scored = Vec::new();
    let mut unscoreable = Vec::new();
    for (sample, outcome) in samples.iter().zip(outcomes) {
        match outcome? {
            Scoring::Scored(v) => scored.push((sample.clone(), v)),
            Scoring::Unscoreable(reason) => {
                log::info!("sample {} is un-scoreable: {reason}", sample.id);
                unscoreable.push(sample.id.clone());
            }
        }
    }
    Ok((scored, unscoreable))
}

fn load_template(config: &PipelineConfig) -> Result<QualityTemplate, PipelineError> {
    if config.quality.template.is_empty() {
        Ok(QualityTemplate::default())
    } else {
        QualityTemplate::load(&config.quality.template).map_err(PipelineError::Template)
    }
}

fn prepare(
    config: &PipelineConfig,
    backend: &dyn ScorerBackend,
    cached: &CachedBackend,
    cache: &Cache,
    options: &RunOptions,
    run_stage1: bool,
) -> Result<Prepared, PipelineError> {
    config.validate()?;
    config.check_paths()?;
    let corpus_bytes = fs::read(&config.corpus).map_err(|e| ConfigError::Io { path: config.corpus.clone(), message: e.to_string() })?;
    let corpus = load_corpus(&config.corpus, config.on_error)?;
    let quality_template = load_template(config)?;
    let model = cached.model_info().map_err(|source| PipelineError::Backend { stage: Stage::Stage1, sample_id: None, source })?;

    let (stage1, survivors) = if run_stage1 {
        let outcome = stage1(&corpus.samples, config, backend, cache, cached.model_id(), &quality_template)?;
        let survivors = outcome.retained.clone();
        (Some(outcome), survivors)
    } else {
        (None, corpus.samples)
    };
    if let Some(s) = &stage1 {
        write_file(&Path::new(&config.output_dir).join(STAGE1_FILE), &jsonl(&s.results))?;
    }
    options.check(Stage::Stage1)?;
    if let Some(s) = stage1.as_ref().filter(|s| s.retained.is_empty()) {
        return Err(PipelineError::EmptyStage1 {
            delta: config.quality.delta,
            below: s.counts.below_threshold,
            parse_failed: s.counts.parse_failed,
            backend_failed: s.counts.backend_failed,
        });
    }

    let (scored, unscoreable) = score_difficulties(&survivors, config, cached)?;
    let prepared = Prepared {
        model,
        corpus_sha256: hex::encode(Sha256::digest(&corpus_bytes)),
        corpus_stats: corpus.stats,
        quality_template,
        stage1,
        scored,
        unscoreable,
    };
    options.check(Stage::Difficulty)?;
    Ok(prepared)
}

/// Stage 2 for one band configuration.
fn select(
    config: &PipelineConfig,
    prepared: &Prepared,
    cached: &CachedBackend,
    options: &RunOptions,
) -> Result<(Manifest, Vec<Sample>), PipelineError> {
    if prepared.scored.is_empty() {
        return Err(PipelineError::NothingScoreable { unscoreable: prepared.unscoreable.len() as u64 });
    }
    let vectors: Vec<DifficultyVector> = prepared.scored.iter().map(|(_, v)| v.clone()).collect();
    let summary = summarize_vectors(&vectors).expect("non-empty");
    let bands = config.band_config()?;
    let band = band_filter(&vectors, &bands)?;
    if band.kept.is_empty() {
        return Err(PipelineError::EmptyMid {
            population: vectors.len(),
            thresholds: Box::new(band.thresholds),
            summary: Box::new(summary),
        });
    }

    let embeddings = ordered_map(&band.kept, config.concurrency, |&i| {
        let sample = &prepared.scored[i].0;
        cached.embed(&sample.instruction).map_err(|source| PipelineError::Backend {
            stage: Stage::Embedding,
            sample_id: Some(sample.id.clone()),
            source,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    options.check(Stage::Embedding)?;

    let k = config.selection.k;
    let kc = config.kcenter();
    let picked = kcenter_select(&embeddings, k, kc.start, kc.distance)?;
    let selected: Vec<Sample> = picked.iter().map(|&p| prepared.scored[band.kept[p]].0.clone()).collect();

    let stage1_counts = prepared.stage1.as_ref().map(|s| s.counts).unwrap_or_default();
    let stage1_retained = match &prepared.stage1 {
        Some(s) => s.counts.retained,
        None => prepared.corpus_stats.count,
    };
    let manifest = Manifest {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        model: prepared.model.clone(),
        corpus_sha256: prepared.corpus_sha256.clone(),
        config: config.clone(),
        config_hash: config.hash(),
        templates: TemplateHashes {
            quality_name: prepared.quality_template.name().to_string(),
            quality: prepared.quality_template.hash().to_string(),
            prompt: config.prompt_template().hash(),
        },
        counts: ManifestCounts {
            loaded: prepared.corpus_stats.count,
            rejected_lines: prepared.corpus_stats.rejected,
            stage1: stage1_counts,
            stage1_retained,
            unscoreable: prepared.unscoreable.len() as u64,
            scored: prepared.scored.len() as u64,
            s_mid: band.kept.len() as u64,
            final_count: selected.len() as u64,
        },
        thresholds: band.thresholds,
        difficulty_summary: summary,
        budget: k,
        short_of_budget: band.kept.len() < k,
        policy: PolicyFlags::from_config(config, &prepared.model),
        unscoreable_ids: prepared.unscoreable.clone(),
        selected_ids: selected.iter().map(|s| s.id.clone()).collect(),
    };
    if manifest.short_of_budget {
        log::warn!("S_mid has {} samples, fewer than the budget {k}; all of them were selected", band.kept.len());
    }
    Ok((manifest, selected))
}

fn write_selection(dir: &Path, manifest: &Manifest, selected: &[Sample]) -> Result<PathBuf, PipelineError> {
    let lines: String = selected.iter().map(|s| s.to_line() + "\n").collect();
    write_file(&dir.join(SELECTED_FILE), &lines)?;
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, &manifest.to_json())?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub cache: CacheStats,
}

/// Full selection with the backend named in the config.
pub fn run(config: &PipelineConfig, options: &RunOptions) -> Result<RunReport, PipelineError> {
    let conn = connect(config)?;
    run_with_backend(config, conn.backend.as_ref(), &conn.endpoint, options)
}

pub fn run_with_backend(
    config: &PipelineConfig,
    backend: &dyn ScorerBackend,
    endpoint: &str,
    options: &RunOptions,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let cache = Cache::open(&config.cache_dir)?;
    let cached = open_cached(backend, &cache, endpoint)?;
    let prepared = prepare(config, backend, &cached, &cache, options, true)?;
    let dir = Path::new(&config.output_dir);
    prepared.write_tables(dir, "selection")?;
    let (manifest, selected) = select(config, &prepared, &cached, options)?;
    let manifest_path = write_selection(dir, &manifest, &selected)?;
    Ok(RunReport { manifest, manifest_path, cache: cache.stats() })
}

fn open_cached<'a>(backend: &'a dyn ScorerBackend, cache: &'a Cache, endpoint: &str) -> Result<CachedBackend<'a>, PipelineError> {
    CachedBackend::new(backend, cache, endpoint).map_err(|source| PipelineError::Backend { stage: Stage::Stage1, sample_id: None, source })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub s_mid: u64,
    #[serde(rename = "final")]
    pub final_count: u64,
    pub short_of_budget: bool,
    pub thresholds: Thresholds,
    pub manifest_hash: String,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub runs: Vec<(f64, Manifest)>,
    pub table: Vec<SweepRow>,
}

pub fn sweep(config: &PipelineConfig, sigmas: &[f64], options: &RunOptions) -> Result<SweepReport, PipelineError> {
    let conn = connect(config)?;
    sweep_with_backend(config, sigmas, conn.backend.as_ref(), &conn.endpoint, options)
}

/// Scores once, then runs Stage 2 for each σ-window. Per-σ results go to
/// `output_dir/sigma-<σ>/`.
pub fn sweep_with_backend(
    config: &PipelineConfig,
    sigmas: &[f64],
    backend: &dyn ScorerBackend,
    endpoint: &str,
    options: &RunOptions,
) -> Result<SweepReport, PipelineError> {
    if sigmas.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one sigma".into()).into());
    }
    let configs: Vec<PipelineConfig> = sigmas.iter().map(|&s| config.with_sigma(s)).collect();
    for c in &configs {
        c.validate()?;
    }
    let cache = Cache::open(&config.cache_dir)?;
    let cached = open_cached(backend, &cache, endpoint)?;
    let prepared = prepare(config, backend, &cached, &cache, options, true)?;
    let root = Path::new(&config.output_dir);
    prepared.write_tables(root, "selection")?;

    let mut runs = Vec::new();
    let mut table = Vec::new();
    for (&sigma, c) in sigmas.iter().zip(&configs) {
        let (manifest, selected) = select(c, &prepared, &cached, options)?;
        write_selection(&root.join(format!("sigma-{sigma}")), &manifest, &selected)?;
        let band = c.band_config()?.d1;
        table.push(SweepRow {
            sigma,
            p_low: band.p_low,
            p_high: band.p_high,
            s_mid: manifest.counts.s_mid,
            final_count: manifest.counts.final_count,
            short_of_budget: manifest.short_of_budget,
            thresholds: manifest.thresholds,
            manifest_hash: manifest.hash(),
        });
        runs.push((sigma, manifest));
    }
    write_file(&root.join(SWEEP_FILE), &jsonl(&table))?;
    Ok(SweepReport { runs, table })
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub snapshot: DifficultySnapshot,
    pub unscoreable: Vec<String>,
    pub snapshot_path: PathBuf,
}

/// Computes and caches difficulties without selecting. With `probe`, that
/// file is scored as-is (no quality filter).
pub fn score(config: &PipelineConfig, probe: Option<&Path>, label: &str, options: &RunOptions) -> Result<ScoreReport, PipelineError> {
    let conn = connect(config)?;
    score_with_backend(config, probe, label, conn.backend.as_ref(), &conn.endpoint, options)
}

pub fn score_with_backend(
    config: &PipelineConfig,
    probe: Option<&Path>,
    label: &str,
    backend: &dyn ScorerBackend,
    endpoint: &str,
    options: &RunOptions,
) -> Result<ScoreReport, PipelineError> {
    let mut config = config.clone();
    if let Some(p) = probe {
        config.corpus = p.display().to_string();
    }
    config.validate()?;
    let cache = Cache::open(&config.cache_dir)?;
    let cached = open_cached(backend, &cache, endpoint)?;
    let prepared = prepare(&config, backend, &cached, &cache, options, probe.is_none())?;
    let dir = Path::new(&config.output_dir);
    prepared.write_tables(dir, label)?;
    Ok(ScoreReport { snapshot: prepared.snapshot(label), unscoreable: prepared.unscoreable, snapshot_path: dir.join(SNAPSHOT_FILE) })
}

/// Loads a snapshot written by `score` or `run`.
pub fn load_snapshot(path: &Path) -> Result<DifficultySnapshot, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())).into())
}
