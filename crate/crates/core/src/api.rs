//! Request and response bodies of the HTTP service.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapters::{Rejection, SourceKind};
use crate::mcqa::{CanonicalRecord, Language, Split};
use crate::perturb::{PerturbConfig, TransformKind, TransformedItem, TransformedRecord};
use crate::prompting::{Extras, MessageList, Stage};
use crate::report::FormatSlice;
use crate::runner::{ExecuteSummary, RunManifest};
use crate::scoring::{AggregateScore, CellScore, GridKey, ItemResult, ParseMode, ParsedAnswer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub source: SourceKind,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub mmlu_categories: Option<Vec<String>>,
    pub records: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub dataset: String,
    pub items: Vec<CanonicalRecord>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRequest {
    pub items: Vec<CanonicalRecord>,
    pub kind: TransformKind,
    pub global_seed: u64,
    #[serde(default)]
    pub run_index: u32,
    #[serde(default)]
    pub perturb: PerturbConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub item_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformResponse {
    pub records: Vec<TransformedRecord>,
    pub skipped: Vec<SkippedItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseRequest {
    pub text: String,
    pub labels: Vec<char>,
    #[serde(default)]
    pub mode: ParseMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResponse {
    pub parsed: ParsedAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub stage: Stage,
    pub item: TransformedItem,
    pub prompt_id: String,
    #[serde(default)]
    pub language: Option<Language>,
    #[serde(default)]
    pub extras: Extras,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub messages: MessageList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCellRequest {
    pub results: Vec<ItemResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRequest {
    pub cells: Vec<CellScore>,
    #[serde(default)]
    pub grid: Option<GridKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRequest {
    pub baseline: AggregateScore,
    pub other: AggregateScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResponse {
    pub delta: f64,
    pub formatted: String,
}

/// Starts a run. Dataset and prompt paths in the manifest resolve against
/// `base_dir` on the server's filesystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub manifest: RunManifest,
    pub base_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub max_jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ExecuteSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub store_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub scores: crate::runner::ScoreFile,
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default)]
    pub include_std: bool,
    #[serde(default)]
    pub format_slice: FormatSlice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportFile {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub files: Vec<ReportFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
