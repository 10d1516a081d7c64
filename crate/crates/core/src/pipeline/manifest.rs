use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BandMode, PipelineConfig, StartRule};
use crate::difficulty::Aggregation;
use crate::quality::Stage1Counts;
use crate::report::SnapshotSummary;
use crate::scorer::ModelInfo;
use crate::selection::{Distance, Thresholds};

pub const TOOL_NAME: &str = "dds";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateHashes {
    pub quality_name: String,
    pub quality: String,
    pub prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub loaded: u64,
    pub rejected_lines: u64,
    pub stage1: Stage1Counts,
    pub stage1_retained: u64,
    pub unscoreable: u64,
    pub scored: u64,
    pub s_mid: u64,
    #[serde(rename = "final")]
    pub final_count: u64,
}

impl ManifestCounts {
    /// `final <= S_mid <= scored <= stage1_retained <= loaded`.
    pub fn is_consistent(&self) -> bool {
        self.final_count <= self.s_mid
            && self.s_mid <= self.scored
            && self.scored + self.unscoreable == self.stage1_retained
            && self.stage1_retained == self.stage1.retained
            && self.stage1_retained <= self.loaded
    }
}

/// Every methodological choice that affects the selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyFlags {
    pub quality_rule: String,
    pub percentile_method: String,
    pub band_bounds: String,
    pub band_mode: BandMode,
    pub banded_values: String,
    pub importance_aggregation: Aggregation,
    pub attention_layer_policy: String,
    pub attention_renormalized: bool,
    pub last_token_rule: String,
    pub zero_attention_rule: String,
    pub multi_turn: String,
    pub decoding: String,
    pub unscoreable: String,
    pub embedding_text: String,
    pub kcenter_start: String,
    pub distance: Distance,
}

impl PolicyFlags {
    pub fn from_config(config: &PipelineConfig, model: &ModelInfo) -> Self {
        let s = &config.selection;
        let attention = config.difficulty.aggregation.wants_attention();
        Self {
            quality_rule: "score >= delta".into(),
            percentile_method: "nearest_rank".into(),
            band_bounds: "closed".into(),
            band_mode: s.band_mode,
            banded_values: if attention && s.use_attention_variant { "attention_weighted".into() } else { "plain".into() },
            importance_aggregation: config.difficulty.aggregation,
            attention_layer_policy: model.attention_layer_policy.clone(),
            attention_renormalized: false,
            last_token_rule: "mean_of_other_scores".into(),
            zero_attention_rule: "uniform".into(),
            multi_turn: "history_linearized_into_prompt".into(),
            decoding: "greedy".into(),
            unscoreable: "excluded_before_percentiles".into(),
            embedding_text: "instruction".into(),
            kcenter_start: match s.start {
                StartRule::LowestIndex => "lowest_index".into(),
                StartRule::Seeded => format!("seeded:{}", s.seed),
            },
            distance: s.distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub model: ModelInfo,
    pub corpus_sha256: String,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub templates: TemplateHashes,
    pub counts: ManifestCounts,
    pub thresholds: Thresholds,
    pub difficulty_summary: SnapshotSummary,
    pub budget: usize,
    pub short_of_budget: bool,
    pub policy: PolicyFlags,
    pub unscoreable_ids: Vec<String>,
    pub selected_ids: Vec<String>,
}

impl Manifest {
    /// Canonical serialized form; what is written to disk.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
