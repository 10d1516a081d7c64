mod common;

use std::fs;
use std::sync::atomic::{AtomicU64, Ordering};

use common::{oracle_select, planted, setup};
use dds_core::difficulty::Metric;
use dds_core::pipeline::{
    run_with_backend, score_with_backend, sweep_with_backend, ErrorCategory, PipelineError, RunOptions, Stage, MANIFEST_FILE,
    SELECTED_FILE, STAGE1_FILE,
};
use dds_core::quality::QualityStatus;
use dds_core::scorer::{GenParams, MockBackend, ModelInfo, ScorerBackend, ScorerError, TokenScoreRecord};

const ENDPOINT: &str = "mock:test";

#[test]
fn end_to_end_matches_oracle_and_replays_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(200, 7);
    let config = setup(dir.path(), &p, 20);
    let mock = MockBackend::new(p.mock.clone()).unwrap();

    let cold = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    let expected = oracle_select(&p, 90, 10.0, 60.0, 20);
    assert_eq!(cold.manifest.selected_ids, expected);
    assert_eq!(cold.manifest.counts.final_count, 20);
    assert!(cold.manifest.counts.is_consistent());
    assert!(mock.calls().total() > 0);
    let cold_bytes = fs::read(&cold.manifest_path).unwrap();

    mock.reset_calls();
    let warm = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    assert_eq!(mock.calls().total(), 0, "{:?}", mock.calls());
    assert_eq!(fs::read(&warm.manifest_path).unwrap(), cold_bytes);
    assert_eq!(warm.manifest.hash(), cold.manifest.hash());

    let selected = fs::read_to_string(dir.path().join("out").join(SELECTED_FILE)).unwrap();
    let ids: Vec<String> =
        selected.lines().map(|l| dds_core::corpus::Sample::from_line(l).unwrap().id).collect();
    assert_eq!(ids, expected);
}

#[test]
fn cold_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(120, 11);
    let config = setup(dir.path(), &p, 10);
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let a = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    let bytes = fs::read(&a.manifest_path).unwrap();
    fs::remove_dir_all(&config.cache_dir).unwrap();
    fs::remove_dir_all(&config.output_dir).unwrap();
    let b = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    assert_eq!(fs::read(&b.manifest_path).unwrap(), bytes);
}

#[test]
fn manifest_records_defaults_and_policies() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(60, 3);
    let mut config = setup(dir.path(), &p, 5000);
    config.selection.k = 5000;
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let m = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap().manifest;
    assert_eq!(m.config.quality.delta, 90);
    assert_eq!(m.budget, 5000);
    assert!(m.short_of_budget);
    assert_eq!(m.counts.final_count, m.counts.s_mid);
    assert_eq!(m.policy.percentile_method, "nearest_rank");
    assert_eq!(m.policy.attention_layer_policy, "mock:salience");
    assert!(!m.policy.attention_renormalized);
    assert_eq!(m.model.model_id, "mock-unigram-v1");
    assert_eq!(m.thresholds.get(Metric::D1).p_low, 10.0);
    let planted_failures = p.scores.iter().filter(|s| s.is_none()).count() as u64;
    assert_eq!(m.counts.stage1.parse_failed, planted_failures);
    let on_disk: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out").join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk["counts"]["final"], m.counts.final_count);
}

#[test]
fn crash_after_stage1_then_resume() {
    let p = planted(150, 5);
    let uninterrupted = {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path(), &p, 15);
        let mock = MockBackend::new(p.mock.clone()).unwrap();
        run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap().manifest.to_json()
    };

    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), &p, 15);
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    for stage in [Stage::Stage1, Stage::Difficulty, Stage::Embedding] {
        fs::remove_dir_all(dir.path().join("cache")).ok();
        let halted = run_with_backend(&config, &mock, ENDPOINT, &RunOptions { halt_after: Some(stage) });
        assert!(matches!(halted, Err(PipelineError::Halted(s)) if s == stage));
        assert!(dir.path().join("out").join(STAGE1_FILE).exists());
        mock.reset_calls();
        let resumed = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
        if stage == Stage::Stage1 {
            assert_eq!(mock.calls().info, 0);
        }
        // config paths differ between the two temp roots; compare the rest.
        let strip = |s: &str| {
            let mut v: serde_json::Value = serde_json::from_str(s).unwrap();
            v.as_object_mut().unwrap().remove("config");
            v.as_object_mut().unwrap().remove("config_hash");
            v.as_object_mut().unwrap().remove("corpus_sha256");
            v
        };
        assert_eq!(strip(&resumed.manifest.to_json()), strip(&uninterrupted));
    }
}

/// Fails every call after the first `budget` with `Unreachable`.
struct Flaky<'a> {
    inner: &'a MockBackend,
    budget: AtomicU64,
}

impl Flaky<'_> {
    fn spend(&self) -> Result<(), ScorerError> {
        let left = self.budget.fetch_sub(1, Ordering::SeqCst);
        if left == 0 || left > u64::MAX / 2 {
            self.budget.store(0, Ordering::SeqCst);
            return Err(ScorerError::unreachable("connection refused"));
        }
        Ok(())
    }
}

impl ScorerBackend for Flaky<'_> {
    fn score_target(&self, c: &str, t: &str, a: bool) -> Result<TokenScoreRecord, ScorerError> {
        self.spend()?;
        self.inner.score_target(c, t, a)
    }
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScorerError> {
        self.spend()?;
        self.inner.generate(prompt, params)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, ScorerError> {
        self.spend()?;
        self.inner.embed(text)
    }
    fn model_info(&self) -> Result<ModelInfo, ScorerError> {
        self.inner.model_info()
    }
}

#[test]
fn outage_aborts_and_rerun_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(100, 9);
    let mut config = setup(dir.path(), &p, 10);
    config.concurrency = 1;
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let reference = {
        let other = tempfile::tempdir().unwrap();
        let mut c = config.clone();
        c.cache_dir = other.path().join("cache").display().to_string();
        c.output_dir = other.path().join("out").display().to_string();
        let m = run_with_backend(&c, &mock, ENDPOINT, &RunOptions::default()).unwrap().manifest;
        m.selected_ids
    };

    for budget in [40, 100, 80] {
        let flaky = Flaky { inner: &mock, budget: AtomicU64::new(budget) };
        let err = run_with_backend(&config, &flaky, ENDPOINT, &RunOptions::default()).unwrap_err();
        assert_eq!(err.category(), ErrorCategory::BackendUnreachable, "{err}");
    }
    mock.reset_calls();
    let resumed = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    assert_eq!(resumed.manifest.selected_ids, reference);
}

#[test]
fn impossible_delta_is_empty_selection() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(30, 2);
    let mut config = setup(dir.path(), &p, 5);
    config.quality.delta = 101;
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let err = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::EmptyStage1 { delta: 101, .. }));
    assert_eq!(err.category(), ErrorCategory::EmptySelection);
    let stage1 = fs::read_to_string(dir.path().join("out").join(STAGE1_FILE)).unwrap();
    assert_eq!(stage1.lines().count(), 30);
}

#[test]
fn sweep_scores_once() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(200, 21);
    let config = setup(dir.path(), &p, 20);
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let report = sweep_with_backend(&config, &[35.0, 40.0, 50.0], &mock, ENDPOINT, &RunOptions::default()).unwrap();
    assert_eq!(report.runs.len(), 3);
    let bands: Vec<(f64, f64)> = report.table.iter().map(|r| (r.p_low, r.p_high)).collect();
    assert_eq!(bands, vec![(10.0, 60.0), (15.0, 65.0), (25.0, 75.0)]);

    let retained: u64 = report.runs[0].1.counts.stage1_retained;
    let calls = mock.calls();
    // D1 and D3 scoring plus D2 generation and scoring, once per survivor.
    assert_eq!(calls.score, 3 * retained);
    let quality_calls = calls.generate - retained;
    let parse_failures = report.runs[0].1.counts.stage1.parse_failed;
    assert_eq!(quality_calls, 200 + 2 * parse_failures);

    for (sigma, m) in &report.runs {
        assert!(m.counts.is_consistent());
        assert_eq!(m.config.selection.sigma, *sigma);
        assert_eq!(m.selected_ids.len() as u64, m.counts.final_count);
        let expected = oracle_select(&p, 90, sigma - 25.0, sigma + 25.0, 20);
        assert_eq!(m.selected_ids, expected, "sigma {sigma}");
        let on_disk = fs::read_to_string(dir.path().join("out").join(format!("sigma-{sigma}")).join(MANIFEST_FILE)).unwrap();
        assert_eq!(on_disk, m.to_json());
    }
    let empty = sweep_with_backend(&config, &[], &mock, ENDPOINT, &RunOptions::default()).unwrap_err();
    assert_eq!(empty.category(), ErrorCategory::Config);
}

#[test]
fn score_then_run_needs_no_difficulty_calls() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(80, 13);
    let config = setup(dir.path(), &p, 8);
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let scored = score_with_backend(&config, None, "before", &mock, ENDPOINT, &RunOptions::default()).unwrap();
    assert!(!scored.snapshot.samples.is_empty());
    mock.reset_calls();
    run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    let calls = mock.calls();
    assert_eq!((calls.score, calls.generate, calls.info), (0, 0, 0));
    assert!(calls.embed > 0);
}

#[test]
fn empty_generation_is_unscoreable() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = planted(40, 17);
    let victim = (0..40).find(|&i| p.scores[i].is_some_and(|s| s >= 90)).unwrap();
    let prompt = dds_core::corpus::flatten_prompt(&p.samples[victim], &Default::default());
    p.mock.generations.insert(prompt, "   ".into());
    let config = setup(dir.path(), &p, 40);
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let m = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap().manifest;
    assert_eq!(m.unscoreable_ids, vec![p.samples[victim].id.clone()]);
    assert_eq!(m.counts.unscoreable, 1);
    assert_eq!(m.counts.scored + 1, m.counts.stage1_retained);
    assert!(!m.selected_ids.contains(&p.samples[victim].id));
}

#[test]
fn corrupted_cache_entry_is_refetched() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(50, 19);
    let config = setup(dir.path(), &p, 5);
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    let first = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    let mut entries = Vec::new();
    for a in fs::read_dir(dir.path().join("cache")).unwrap() {
        let a = a.unwrap().path();
        if a.is_dir() {
            for b in fs::read_dir(&a).unwrap() {
                for f in fs::read_dir(b.unwrap().path()).unwrap() {
                    entries.push(f.unwrap().path());
                }
            }
        }
    }
    entries.sort();
    for path in entries.iter().step_by(7) {
        let mut bytes = fs::read(path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x20;
        fs::write(path, bytes).unwrap();
    }
    mock.reset_calls();
    let second = run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    assert!(second.cache.corrupt > 0);
    assert!(mock.calls().total() > 0);
    assert_eq!(second.manifest.to_json(), first.manifest.to_json());
}

#[test]
fn stage1_results_file_lists_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(40, 23);
    let config = setup(dir.path(), &p, 5);
    let mock = MockBackend::new(p.mock.clone()).unwrap();
    run_with_backend(&config, &mock, ENDPOINT, &RunOptions::default()).unwrap();
    let text = fs::read_to_string(dir.path().join("out").join(STAGE1_FILE)).unwrap();
    let results: Vec<dds_core::quality::QualityResult> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(results.len(), 40);
    for (r, (s, score)) in results.iter().zip(p.samples.iter().zip(&p.scores)) {
        assert_eq!(r.sample_id, s.id);
        assert_eq!(r.score, *score);
        assert_eq!(r.status == QualityStatus::Parsed, score.is_some());
    }
}
