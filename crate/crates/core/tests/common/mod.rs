//! Planted mock corpora and brute-force oracles shared by the integration
//! and acceptance tests. Nothing here calls into the library's numeric
//! code; the oracles are written from the definitions.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dds_core::corpus::{flatten_prompt, PromptTemplate, Sample, Turn};
use dds_core::pipeline::PipelineConfig;
use dds_core::quality::{render_quality_prompt, QualityTemplate};
use dds_core::scorer::mock::AttentionRule;
use dds_core::scorer::MockConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EMBED_DIM: usize = 8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random unigram table over `w00..wNN` summing to 1.
pub fn vocab(rng: &mut ChaCha8Rng, size: usize) -> BTreeMap<String, f64> {
    let weights: Vec<f64> = (0..size).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut table: BTreeMap<String, f64> = weights.iter().enumerate().map(|(i, w)| (format!("w{i:02}"), w / total)).collect();
    let rest: f64 = table.iter().filter(|(k, _)| k.as_str() != "w00").map(|(_, v)| v).sum();
    table.insert("w00".into(), 1.0 - rest);
    table
}

pub fn text(rng: &mut ChaCha8Rng, table: &BTreeMap<String, f64>, min: usize, max: usize) -> String {
    let words: Vec<&String> = table.keys().collect();
    let n = rng.random_range(min..=max);
    (0..n).map(|_| words[rng.random_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ")
}

pub struct Planted {
    pub samples: Vec<Sample>,
    /// Planted quality score per sample; `None` plants an unparseable reply.
    pub scores: Vec<Option<u8>>,
    pub a_prime: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub salience: BTreeMap<String, f64>,
    pub mock: MockConfig,
}

/// Corpus whose quality ratings, model answers and embeddings are scripted
/// into the mock backend.
pub fn planted(n: usize, seed: u64) -> Planted {
    let mut r = rng(seed);
    let table = vocab(&mut r, 24);
    let salience: BTreeMap<String, f64> = table.keys().map(|k| (k.clone(), r.random_range(0.1..2.0))).collect();
    let mut mock = MockConfig::from_unigram(table.clone());
    mock.embedding_dim = EMBED_DIM;
    mock.attention = AttentionRule::Salience { salience: salience.clone(), default_salience: 1.0 };
    let quality = QualityTemplate::default();
    let prompt = PromptTemplate::default();
    let formats = ["{score: N}", "Score: N", "**Score**: N\nThe answer is fine.", "Assessment done.\n{\"score\": N}"];

    let mut planted = Planted { samples: vec![], scores: vec![], a_prime: vec![], embeddings: vec![], salience, mock: mock.clone() };
    for i in 0..n {
        let mut sample = Sample::new(format!("s{i:04}"), text(&mut r, &table, 4, 12), text(&mut r, &table, 3, 20));
        if i % 10 == 3 {
            sample = sample.with_history(vec![Turn { user: text(&mut r, &table, 2, 6), assistant: text(&mut r, &table, 2, 6) }]);
        }
        let score = match r.random_range(0..100) {
            0..=2 => None,
            3..=59 => Some(r.random_range(90..=100u8)),
            _ => Some(r.random_range(40..=89u8)),
        };
        let reply = match score {
            Some(s) => formats[i % formats.len()].replace('N', &s.to_string()),
            None => "I am unable to rate this dialogue.".to_string(),
        };
        let a_prime = text(&mut r, &table, 2, 10);
        let embedding: Vec<f64> = (0..EMBED_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
        mock.generations.insert(render_quality_prompt(&sample, &quality), reply);
        mock.generations.insert(flatten_prompt(&sample, &prompt), a_prime.clone());
        mock.embeddings.insert(sample.instruction.clone(), embedding.clone());
        planted.samples.push(sample);
        planted.scores.push(score);
        planted.a_prime.push(a_prime);
        planted.embeddings.push(embedding);
    }
    planted.mock = mock;
    planted
}

pub fn write_corpus(path: &Path, samples: &[Sample]) {
    let body: String = samples.iter().map(|s| s.to_line() + "\n").collect();
    std::fs::write(path, body).unwrap();
}

pub fn write_mock(path: &Path, mock: &MockConfig) {
    std::fs::write(path, serde_json::to_string(mock).unwrap()).unwrap();
}

/// Config for a planted run rooted at `dir` (corpus.jsonl, mock.json, cache/, out/).
pub fn setup(dir: &Path, planted: &Planted, k: usize) -> PipelineConfig {
    let corpus = dir.join("corpus.jsonl");
    let mock = dir.join("mock.json");
    write_corpus(&corpus, &planted.samples);
    write_mock(&mock, &planted.mock);
    let path = |p: PathBuf| p.display().to_string();
    let mut c = PipelineConfig::default();
    c.corpus = path(corpus);
    c.backend = format!("mock:{}", path(mock));
    c.cache_dir = path(dir.join("cache"));
    c.output_dir = path(dir.join("out"));
    c.selection.k = k;
    c
}

// ---- oracles -------------------------------------------------------------

pub fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

pub fn prompt_tokens(sample: &Sample) -> Vec<&str> {
    let mut out = Vec::new();
    for t in &sample.history {
        out.extend(tokens(&t.user));
        out.extend(tokens(&t.assistant));
    }
    out.extend(tokens(&sample.instruction));
    out
}

pub fn oracle_ppl(toks: &[&str], table: &BTreeMap<String, f64>) -> f64 {
    let total: f64 = toks.iter().map(|t| table[*t].ln()).sum();
    (-total / toks.len() as f64).exp()
}

/// Importance under the mock's salience rule (`w[j][i] = s_i / j`), mean
/// over later rows; the last token takes the mean of the others.
pub fn oracle_importance(toks: &[&str], salience: &BTreeMap<String, f64>) -> Vec<f64> {
    let n = toks.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut imp: Vec<f64> = (0..n - 1)
        .map(|i| {
            let s = salience[toks[i]];
            let rows: Vec<f64> = (i + 1..n).map(|j| s / j as f64).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        })
        .collect();
    imp.push(imp.iter().sum::<f64>() / imp.len() as f64);
    imp
}

pub fn oracle_weighted(toks: &[&str], table: &BTreeMap<String, f64>, importance: &[f64]) -> f64 {
    let num: f64 = toks.iter().zip(importance).map(|(t, w)| w * table[*t].ln()).sum();
    let den: f64 = importance.iter().sum();
    (-num / den).exp()
}

/// Nearest rank for integral percentiles, in integer arithmetic.
pub fn oracle_nearest_rank(values: &[f64], p: f64) -> f64 {
    assert_eq!(p.fract(), 0.0);
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let rank = (p as usize * n).div_ceil(100);
    v[rank.clamp(1, n) - 1]
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Farthest-point trace recomputing every distance from scratch.
pub fn oracle_kcenter(points: &[Vec<f64>], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k.min(points.len()) {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| euclid(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            match best {
                Some((_, bd)) if d <= bd => {}
                _ => best = Some((i, d)),
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

pub fn oracle_radius(points: &[Vec<f64>], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| centers.iter().map(|&c| euclid(p, &points[c])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Independent re-implementation of the whole selection for a planted
/// corpus: score ≥ delta, mean-attention difficulties, shared nearest-rank
/// band, farthest-point from the lowest index.
pub fn oracle_select(p: &Planted, delta: u8, p_low: f64, p_high: f64, k: usize) -> Vec<String> {
    let table = &p.mock.unigram;
    let kept: Vec<usize> = (0..p.samples.len()).filter(|&i| p.scores[i].is_some_and(|s| s >= delta)).collect();
    let metrics: Vec<[f64; 3]> = kept
        .iter()
        .map(|&i| {
            let s = &p.samples[i];
            let d1 = oracle_ppl(&prompt_tokens(s), table);
            let a = tokens(&p.a_prime[i]);
            let d2 = oracle_weighted(&a, table, &oracle_importance(&a, &p.salience));
            let r = tokens(&s.response);
            let d3 = oracle_weighted(&r, table, &oracle_importance(&r, &p.salience));
            [d1, d2, d3]
        })
        .collect();
    let taus: Vec<(f64, f64)> = (0..3)
        .map(|m| {
            let col: Vec<f64> = metrics.iter().map(|v| v[m]).collect();
            (oracle_nearest_rank(&col, p_low), oracle_nearest_rank(&col, p_high))
        })
        .collect();
    let mid: Vec<usize> =
        (0..kept.len()).filter(|&j| (0..3).all(|m| taus[m].0 <= metrics[j][m] && metrics[j][m] <= taus[m].1)).collect();
    let points: Vec<Vec<f64>> = mid.iter().map(|&j| p.embeddings[kept[j]].clone()).collect();
    oracle_kcenter(&points, k, 0).into_iter().map(|x| p.samples[kept[mid[x]]].id.clone()).collect()
}
