//! Evaluation matrix planning and execution.
//!
//! A [`RunManifest`] names datasets, transformations, models, prompt
//! configurations and a run count. [`plan`] expands it into one [`JobSpec`]
//! per (dataset, transform, model, prompt, run, item); [`execute`] runs the
//! jobs against a [`ResultStore`] that makes re-execution resumable.

mod execute;
mod manifest;
mod scores;
mod store;

pub use execute::{execute, ExecuteOptions, ExecuteSummary, Harness, HarnessError};
pub use manifest::{DatasetRef, ManifestError, ModelBackendSpec, ModelSpec, Overrides, RunManifest};
pub use scores::{score_store, AggregateRow, CellRow, ScoreFile};
pub use store::{JobOutcome, ResultStore, StoreError, StoreRecord};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcqa::Dataset;
use crate::perturb::{LABELS_STAGE, SHUFFLE_STAGE};
use crate::prompting::PromptLibrary;
use crate::rng::derive_seed;
use crate::twostep::Transform;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JobSpec {
    pub dataset: String,
    pub item_id: String,
    pub transform: Transform,
    pub model_id: String,
    pub prompt_id: String,
    pub run_index: u32,
    pub shuffle_seed: u64,
    pub label_seed: u64,
}

impl JobSpec {
    /// Stable identity of the job within a manifest.
    pub fn key(&self) -> String {
        serde_json::to_string(&(
            &self.dataset,
            &self.item_id,
            self.transform,
            &self.model_id,
            &self.prompt_id,
            self.run_index,
        ))
        .expect("job key serializes")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("manifest lists no transformations")]
    NoTransforms,
    #[error("manifest lists no models")]
    NoModels,
    #[error("manifest lists no prompt configurations")]
    NoPrompts,
    #[error("manifest lists no datasets")]
    NoDatasets,
    #[error("run_count must be at least 1")]
    NoRuns,
    #[error("dataset {0:?} is referenced by the manifest but was not loaded")]
    UnloadedDataset(String),
    #[error("dataset {0:?} has no items")]
    EmptyDataset(String),
    #[error("duplicate model id {0:?}")]
    DuplicateModel(String),
    #[error("baseline model {0:?} is not among the models")]
    UnknownBaseline(String),
    #[error("no prompt configuration {prompt:?} for dataset {dataset:?} ({language})")]
    UnknownPrompt {
        prompt: String,
        dataset: String,
        language: String,
    },
    #[error("duplicate entry {0:?} in manifest list")]
    Duplicate(String),
}

fn check_distinct<'a>(values: impl IntoIterator<Item = &'a str>) -> Result<(), PlanError> {
    let mut seen = BTreeSet::new();
    for v in values {
        if !seen.insert(v) {
            return Err(PlanError::Duplicate(v.to_string()));
        }
    }
    Ok(())
}

/// Expands a manifest into jobs ordered by dataset, transform, model, prompt,
/// run and item.
pub fn plan(
    manifest: &RunManifest,
    datasets: &[Dataset],
    library: &PromptLibrary,
) -> Result<Vec<JobSpec>, PlanError> {
    if manifest.transforms.is_empty() {
        return Err(PlanError::NoTransforms);
    }
    if manifest.models.is_empty() {
        return Err(PlanError::NoModels);
    }
    if manifest.prompts.is_empty() {
        return Err(PlanError::NoPrompts);
    }
    if manifest.datasets.is_empty() {
        return Err(PlanError::NoDatasets);
    }
    if manifest.run_count == 0 {
        return Err(PlanError::NoRuns);
    }
    let mut ids = BTreeSet::new();
    for m in &manifest.models {
        if !ids.insert(m.id.as_str()) {
            return Err(PlanError::DuplicateModel(m.id.clone()));
        }
    }
    if !ids.contains(manifest.baseline.as_str()) {
        return Err(PlanError::UnknownBaseline(manifest.baseline.clone()));
    }
    check_distinct(manifest.prompts.iter().map(String::as_str))?;
    check_distinct(manifest.transforms.iter().map(|t| t.as_str()))?;
    check_distinct(manifest.datasets.iter().map(|d| d.name.as_str()))?;

    let loaded: HashMap<&str, &Dataset> = datasets.iter().map(|d| (d.name.as_str(), d)).collect();
    let mut ordered = Vec::new();
    for r in &manifest.datasets {
        let ds = *loaded
            .get(r.name.as_str())
            .ok_or_else(|| PlanError::UnloadedDataset(r.name.clone()))?;
        let language = ds.language().ok_or_else(|| PlanError::EmptyDataset(r.name.clone()))?;
        for model in &manifest.models {
            for prompt in &manifest.prompts {
                let resolved = model.prompt_for(prompt);
                if library.get(resolved, language).is_err() {
                    return Err(PlanError::UnknownPrompt {
                        prompt: resolved.to_string(),
                        dataset: r.name.clone(),
                        language: language.to_string(),
                    });
                }
            }
        }
        ordered.push(ds);
    }

    let mut jobs = Vec::new();
    for ds in ordered {
        for &transform in &manifest.transforms {
            for model in &manifest.models {
                for prompt in &manifest.prompts {
                    for run_index in 0..manifest.run_count {
                        for item in &ds.items {
                            jobs.push(JobSpec {
                                dataset: ds.name.clone(),
                                item_id: item.id.clone(),
                                transform,
                                model_id: model.id.clone(),
                                prompt_id: prompt.clone(),
                                run_index,
                                shuffle_seed: derive_seed(manifest.global_seed, &item.id, run_index, SHUFFLE_STAGE),
                                label_seed: derive_seed(manifest.global_seed, &item.id, run_index, LABELS_STAGE),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(jobs)
}

pub const SCORES_FILE: &str = "scores.json";
pub const CACHE_FILE: &str = "response_cache.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Harness(#[from] execute::HarnessError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A harness, its plan and the store opened for the manifest digest.
pub struct Prepared {
    pub harness: Harness,
    pub plan: Vec<JobSpec>,
    pub store: ResultStore,
}

/// Loads datasets relative to `base_dir`, plans, and opens the store under
/// `out_root`. Endpoint responses are cached in `out_root` across manifests.
pub fn prepare(manifest: RunManifest, base_dir: &std::path::Path, out_root: &std::path::Path) -> Result<Prepared, RunError> {
    std::fs::create_dir_all(out_root).map_err(|source| RunError::Io {
        path: out_root.display().to_string(),
        source,
    })?;
    let harness = Harness::from_manifest(manifest, base_dir, Some(&out_root.join(CACHE_FILE)))?;
    let plan = harness.plan()?;
    let store = ResultStore::open(out_root, &harness.manifest)?;
    Ok(Prepared { harness, plan, store })
}

impl Prepared {
    /// Scores the store and writes `scores.json` next to the records.
    pub fn write_scores(&self) -> Result<ScoreFile, RunError> {
        let scores = score_store(&self.store, &self.plan, self.harness.datasets());
        let path = self.store.dir().join(SCORES_FILE);
        std::fs::write(&path, scores.to_json()).map_err(|source| RunError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(scores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub digest: String,
    pub store_dir: std::path::PathBuf,
    pub summary: ExecuteSummary,
    pub scores: ScoreFile,
}

/// Plans, executes and scores a manifest.
pub async fn run_manifest(
    manifest: RunManifest,
    base_dir: &std::path::Path,
    out_root: &std::path::Path,
    options: &ExecuteOptions,
) -> Result<RunOutcome, RunError> {
    let p = prepare(manifest, base_dir, out_root)?;
    let summary = execute(&p.harness, &p.plan, &p.store, options).await?;
    let scores = p.write_scores()?;
    Ok(RunOutcome {
        digest: p.store.digest().to_string(),
        store_dir: p.store.dir().to_path_buf(),
        summary,
        scores,
    })
}
