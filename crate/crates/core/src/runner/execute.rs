use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use futures::stream::{self, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::manifest::{ModelBackendSpec, RunManifest};
use super::store::{ResultStore, StoreError, StoreRecord};
use super::JobSpec;
use crate::llm_client::{
    EndpointClient, FailureClass, GenerationContext, GenerationError, GenerationRecord, Model,
    ResponseCache,
};
use crate::mcqa::{load_canonical, Dataset, DatasetError, Language, McqaItem};
use crate::perturb::{apply_one_step_seeded, shuffle};
use crate::prompting::{render, Extras, PromptConfig, PromptError, PromptLibrary, Stage};
use crate::scoring::{is_correct, parse_answer, ItemResult};
use crate::twostep::{run_two_step, LeakPatterns, Transform, TwoStepError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("cannot open response cache: {0}")]
    Cache(std::io::Error),
}

/// Everything a job needs: loaded datasets, prompt configs and model clients.
#[derive(Debug)]
pub struct Harness {
    pub manifest: RunManifest,
    datasets: Vec<Dataset>,
    items: HashMap<(String, String), (usize, usize)>,
    pub library: PromptLibrary,
    models: HashMap<String, Model>,
    leak_en: LeakPatterns,
    leak_es: LeakPatterns,
}

impl Harness {
    /// Builds model clients from the manifest. Endpoint models share
    /// `cache` when one is given; mocks are never cached.
    pub fn new(
        manifest: RunManifest,
        datasets: Vec<Dataset>,
        library: PromptLibrary,
        cache: Option<Arc<ResponseCache>>,
    ) -> Result<Self, HarnessError> {
        let mut models = HashMap::new();
        for spec in &manifest.models {
            let model = match &spec.backend {
                ModelBackendSpec::Mock(cfg) => Model::mock(&spec.id, cfg.clone()),
                ModelBackendSpec::Endpoint(cfg) => {
                    Model::endpoint(&spec.id, Arc::new(EndpointClient::new(cfg.clone())?), cache.clone())
                }
            };
            models.insert(spec.id.clone(), model);
        }
        let mut items = HashMap::new();
        for (d, ds) in datasets.iter().enumerate() {
            for (i, item) in ds.items.iter().enumerate() {
                items.insert((ds.name.clone(), item.id.clone()), (d, i));
            }
        }
        Ok(Self {
            manifest,
            datasets,
            items,
            library,
            models,
            leak_en: LeakPatterns::builtin(Language::En),
            leak_es: LeakPatterns::builtin(Language::Es),
        })
    }

    /// Loads the manifest's datasets and extra prompt files relative to
    /// `base_dir`, then builds the harness. Endpoint responses are cached in
    /// `cache_path` when given.
    pub fn from_manifest(
        manifest: RunManifest,
        base_dir: &Path,
        cache_path: Option<&Path>,
    ) -> Result<Self, HarnessError> {
        let mut datasets = Vec::new();
        for r in &manifest.datasets {
            let mut ds = load_canonical(base_dir.join(&r.path))?;
            ds.name = r.name.clone();
            for item in &mut ds.items {
                item.dataset = r.name.clone();
            }
            datasets.push(ds);
        }
        let mut library = PromptLibrary::builtin();
        for f in &manifest.prompt_files {
            library.insert(PromptConfig::load(base_dir.join(f))?);
        }
        let cache = match cache_path {
            Some(p) if manifest.has_endpoints() => {
                Some(Arc::new(ResponseCache::open(p).map_err(HarnessError::Cache)?))
            }
            _ => None,
        };
        Self::new(manifest, datasets, library, cache)
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn item(&self, dataset: &str, item_id: &str) -> Option<&McqaItem> {
        self.items
            .get(&(dataset.to_string(), item_id.to_string()))
            .map(|&(d, i)| &self.datasets[d].items[i])
    }

    pub fn model(&self, id: &str) -> Option<&Model> {
        self.models.get(id)
    }

    pub fn network_calls(&self) -> u64 {
        self.models.values().map(Model::network_calls).sum()
    }

    pub fn plan(&self) -> Result<Vec<JobSpec>, super::PlanError> {
        super::plan(&self.manifest, &self.datasets, &self.library)
    }

    fn leak_patterns(&self, language: Language) -> &LeakPatterns {
        match language {
            Language::En => &self.leak_en,
            Language::Es => &self.leak_es,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    /// Concurrent jobs; endpoint clients bound their own in-flight requests.
    pub workers: usize,
    /// Stop after starting this many pending jobs.
    pub max_jobs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecuteSummary {
    pub planned: usize,
    pub completed: usize,
    pub failed_retryable: usize,
    pub failed_permanent: usize,
    /// Already terminal in the store before this execution.
    pub skipped: usize,
    /// Pending jobs left unstarted because of `max_jobs`.
    pub remaining: usize,
    pub network_calls: u64,
}

impl ExecuteSummary {
    pub fn failed(&self) -> usize {
        self.failed_retryable + self.failed_permanent
    }
}

struct JobFailure {
    class: FailureClass,
    message: String,
}

impl From<GenerationError> for JobFailure {
    fn from(e: GenerationError) -> Self {
        Self {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

impl From<PromptError> for JobFailure {
    fn from(e: PromptError) -> Self {
        Self {
            class: FailureClass::Permanent,
            message: e.to_string(),
        }
    }
}

impl From<TwoStepError> for JobFailure {
    fn from(e: TwoStepError) -> Self {
        match e {
            TwoStepError::Generation(g) => g.into(),
            other => Self {
                class: FailureClass::Permanent,
                message: other.to_string(),
            },
        }
    }
}

fn permanent(message: String) -> JobFailure {
    JobFailure {
        class: FailureClass::Permanent,
        message,
    }
}

async fn run_job(h: &Harness, job: &JobSpec, key: &str, attempt: u32) -> Result<Vec<StoreRecord>, JobFailure> {
    let item = h
        .item(&job.dataset, &job.item_id)
        .ok_or_else(|| permanent(format!("unknown item {}/{}", job.dataset, job.item_id)))?;
    let model = h
        .model(&job.model_id)
        .ok_or_else(|| permanent(format!("unknown model {}", job.model_id)))?;
    let prompt_id = h
        .manifest
        .model(&job.model_id)
        .map_or(job.prompt_id.as_str(), |m| m.prompt_for(&job.prompt_id));
    let cfg = h.library.get(prompt_id, item.language)?;
    let gold_text = item.gold_text();
    let job_key = key.to_string();
    let generation = |g: GenerationRecord| StoreRecord::Generation {
        job: job_key.clone(),
        attempt,
        generation: g,
    };

    let mut records = Vec::new();
    let (presented, raw_text, flags, cache_keys) = match job.transform {
        Transform::OneStep(kind) => {
            let t = apply_one_step_seeded(kind, item, job.shuffle_seed, job.label_seed, &h.manifest.perturb)
                .map_err(|e| {
                    tracing::warn!(job = key, error = %e, "item skipped");
                    permanent(format!("item skipped: {e}"))
                })?;
            let req = model.request(Stage::Answer, render(Stage::Answer, &t, cfg, &Extras::default())?);
            let ctx = GenerationContext {
                item: &t,
                original_gold_text: gold_text,
                stage: Stage::Answer,
            };
            let g = model.generate(&req, &ctx).await?;
            let rec = GenerationRecord::new(Stage::Answer, &model.id, &req, g);
            let out = (t, rec.text.clone(), Default::default(), vec![rec.cache_key.clone()]);
            records.push(generation(rec));
            out
        }
        Transform::TwoStep(kind) => {
            let t = shuffle(item, job.shuffle_seed);
            let r = run_two_step(&t, kind, model, cfg, h.leak_patterns(item.language), gold_text).await?;
            let out = (
                t,
                r.final_answer.text.clone(),
                r.intermediate.flags.clone(),
                vec![r.step1.cache_key.clone(), r.final_answer.cache_key.clone()],
            );
            records.push(generation(r.step1));
            records.push(StoreRecord::Intermediate {
                job: key.to_string(),
                attempt,
                intermediate: r.intermediate,
            });
            records.push(generation(r.final_answer));
            out
        }
    };

    let parsed = parse_answer(&raw_text, &presented.labels(), h.manifest.parse_mode);
    records.push(StoreRecord::Result {
        job: key.to_string(),
        attempt,
        result: ItemResult {
            dataset: job.dataset.clone(),
            item_id: job.item_id.clone(),
            transform: job.transform,
            model_id: job.model_id.clone(),
            prompt_id: job.prompt_id.clone(),
            run_index: job.run_index,
            raw_text,
            gold_label: presented.gold_label,
            parsed,
            correct: is_correct(parsed, presented.gold_label),
            flags,
            cache_keys,
        },
        provenance: presented.provenance,
    });
    Ok(records)
}

/// Runs every job of `plan` that the store does not already hold a terminal
/// record for. Failures are recorded per job and never stop other jobs; only
/// store errors abort.
pub async fn execute(
    h: &Harness,
    plan: &[JobSpec],
    store: &ResultStore,
    options: &ExecuteOptions,
) -> Result<ExecuteSummary, StoreError> {
    let net_before = h.network_calls();
    let pending: Vec<&JobSpec> = plan.iter().filter(|j| store.needs_run(&j.key())).collect();
    let limit = options.max_jobs.unwrap_or(usize::MAX).min(pending.len());
    let completed = AtomicUsize::new(0);
    let retryable = AtomicUsize::new(0);
    let permanent = AtomicUsize::new(0);

    stream::iter(pending.iter().take(limit).map(Ok))
        .try_for_each_concurrent(options.workers.max(1), |job| {
            let (completed, retryable, permanent) = (&completed, &retryable, &permanent);
            async move {
                let key = job.key();
                let attempt = store.next_attempt(&key);
                let records = match run_job(h, job, &key, attempt).await {
                    Ok(records) => {
                        completed.fetch_add(1, Ordering::Relaxed);
                        records
                    }
                    Err(f) => {
                        match f.class {
                            FailureClass::Retryable => retryable.fetch_add(1, Ordering::Relaxed),
                            FailureClass::Permanent => permanent.fetch_add(1, Ordering::Relaxed),
                        };
                        tracing::debug!(job = %key, class = ?f.class, message = %f.message, "job failed");
                        vec![StoreRecord::Failure {
                            job: key,
                            attempt,
                            class: f.class,
                            message: f.message,
                        }]
                    }
                };
                store.append(&records)
            }
        })
        .await?;

    Ok(ExecuteSummary {
        planned: plan.len(),
        completed: completed.into_inner(),
        failed_retryable: retryable.into_inner(),
        failed_permanent: permanent.into_inner(),
        skipped: plan.len() - pending.len(),
        remaining: pending.len() - limit,
        network_calls: h.network_calls() - net_before,
    })
}
