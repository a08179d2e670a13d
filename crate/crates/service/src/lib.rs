//! HTTP/JSON front end for the harness.
//!
//! Stateless operations (ingest, transform, parse, render, scoring, report)
//! answer synchronously. Runs are planned synchronously, so manifest and
//! dataset errors surface as `400`, then executed in the background; poll
//! `GET /v1/runs/{id}` and fetch `GET /v1/runs/{id}/scores` once finished.
//! A run id is the manifest digest, so resubmitting a manifest resumes it.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mcqa_core::adapters::{adapt_source, AdapterConfig};
use mcqa_core::api::*;
use mcqa_core::mcqa::{validate_item, CanonicalRecord, McqaItem};
use mcqa_core::perturb::{apply_one_step, TransformedRecord};
use mcqa_core::prompting::{render, PromptLibrary};
use mcqa_core::report::{format_delta, report_files};
use mcqa_core::runner::{execute, prepare, ExecuteOptions, ScoreFile, SCORES_FILE};
use mcqa_core::scoring::{aggregate, aggregate_grid, delta, parse_answer, score_cell};

pub const DEFAULT_WORKERS: usize = 16;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(e: impl ToString) -> Self {
        Self(StatusCode::BAD_REQUEST, e.to_string())
    }

    fn not_found(e: impl ToString) -> Self {
        Self(StatusCode::NOT_FOUND, e.to_string())
    }

    fn conflict(e: impl ToString) -> Self {
        Self(StatusCode::CONFLICT, e.to_string())
    }

    fn internal(e: impl ToString) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub struct AppState {
    out_root: PathBuf,
    library: PromptLibrary,
    runs: Mutex<BTreeMap<String, RunStatus>>,
}

impl AppState {
    /// Run stores live under `out_root/<digest>/`.
    pub fn new(out_root: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            out_root: out_root.into(),
            library: PromptLibrary::builtin(),
            runs: Mutex::new(BTreeMap::new()),
        })
    }

    /// Marks a run as running unless it already is, so a concurrent
    /// submission cannot open the same store. Returns the prior status.
    fn reserve(&self, status: &RunStatus) -> Result<Option<RunStatus>, ApiError> {
        let mut runs = self.runs.lock().expect("run table lock");
        let previous = runs.get(&status.run_id).cloned();
        if previous.as_ref().is_some_and(|s| s.state == RunState::Running) {
            return Err(ApiError::conflict(format!("run {} is already running", status.run_id)));
        }
        runs.insert(status.run_id.clone(), status.clone());
        Ok(previous)
    }

    fn release(&self, run_id: &str, previous: Option<RunStatus>) {
        let mut runs = self.runs.lock().expect("run table lock");
        match previous {
            Some(p) => runs.insert(run_id.to_string(), p),
            None => runs.remove(run_id),
        };
    }

    fn set_status(&self, status: RunStatus) {
        self.runs
            .lock()
            .expect("run table lock")
            .insert(status.run_id.clone(), status);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/ingest", post(ingest))
        .route("/v1/transform", post(transform))
        .route("/v1/parse", post(parse))
        .route("/v1/render", post(render_prompt))
        .route("/v1/score/cell", post(score))
        .route("/v1/aggregate", post(aggregate_cells))
        .route("/v1/delta", post(delta_scores))
        .route("/v1/report", post(report))
        .route("/v1/runs", post(start_run).get(list_runs))
        .route("/v1/runs/{id}", get(run_status))
        .route("/v1/runs/{id}/scores", get(run_scores))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn ingest(Json(req): Json<IngestRequest>) -> ApiResult<IngestResponse> {
    let mut config = AdapterConfig::default();
    if let Some(split) = req.split {
        config.split = split;
    }
    if let Some(categories) = req.mmlu_categories {
        config.mmlu_categories = categories;
    }
    let out = adapt_source(req.source, req.records, &config);
    Ok(Json(IngestResponse {
        dataset: out.dataset.name.clone(),
        items: out.dataset.items.iter().map(CanonicalRecord::from).collect(),
        rejections: out.rejections,
    }))
}

fn items_from(records: Vec<CanonicalRecord>) -> Result<Vec<McqaItem>, ApiError> {
    records
        .into_iter()
        .map(|r| {
            let item = McqaItem::from(r);
            match validate_item(&item).first() {
                Some(v) => Err(ApiError::bad_request(format!("item {:?}: {v}", item.id))),
                None => Ok(item),
            }
        })
        .collect()
}

async fn transform(Json(req): Json<TransformRequest>) -> ApiResult<TransformResponse> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for item in items_from(req.items)? {
        match apply_one_step(req.kind, &item, req.global_seed, req.run_index, &req.perturb) {
            Ok(t) => records.push(TransformedRecord::new(&item, &t)),
            Err(e) => skipped.push(SkippedItem {
                item_id: item.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(Json(TransformResponse { records, skipped }))
}

async fn parse(Json(req): Json<ParseRequest>) -> ApiResult<ParseResponse> {
    Ok(Json(ParseResponse {
        parsed: parse_answer(&req.text, &req.labels, req.mode),
    }))
}

async fn render_prompt(State(state): State<Arc<AppState>>, Json(req): Json<RenderRequest>) -> ApiResult<RenderResponse> {
    let language = req.language.unwrap_or(req.item.language);
    let cfg = state
        .library
        .get(&req.prompt_id, language)
        .map_err(ApiError::bad_request)?;
    let messages = render(req.stage, &req.item, cfg, &req.extras).map_err(ApiError::bad_request)?;
    Ok(Json(RenderResponse { messages }))
}

async fn score(Json(req): Json<ScoreCellRequest>) -> ApiResult<mcqa_core::scoring::CellScore> {
    score_cell(&req.results).map(Json).map_err(ApiError::bad_request)
}

async fn aggregate_cells(Json(req): Json<AggregateRequest>) -> ApiResult<mcqa_core::scoring::AggregateScore> {
    match req.grid {
        Some(grid) => aggregate_grid(grid, &req.cells),
        None => aggregate(&req.cells),
    }
    .map(Json)
    .map_err(ApiError::bad_request)
}

async fn delta_scores(Json(req): Json<DeltaRequest>) -> ApiResult<DeltaResponse> {
    let d = delta(&req.baseline, &req.other).map_err(ApiError::bad_request)?;
    Ok(Json(DeltaResponse {
        delta: d,
        formatted: format_delta(d),
    }))
}

async fn report(Json(req): Json<ReportRequest>) -> ApiResult<ReportResponse> {
    let baseline = req.baseline.unwrap_or_else(|| req.scores.baseline.clone());
    let files = report_files(&req.scores, &baseline, req.include_std, &req.format_slice)
        .map_err(ApiError::bad_request)?
        .into_iter()
        .map(|(name, contents)| ReportFile { name, contents })
        .collect();
    Ok(Json(ReportResponse { files }))
}

async fn start_run(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RunRequest>,
) -> Result<(StatusCode, Json<RunStatus>), ApiError> {
    req.manifest.validate().map_err(ApiError::bad_request)?;
    let run_id = req.manifest.digest();
    let mut status = RunStatus {
        run_id: run_id.clone(),
        state: RunState::Running,
        summary: None,
        error: None,
        store_dir: state.out_root.join(&run_id),
    };
    {
        let previous = state.reserve(&status)?;
        let out_root = state.out_root.clone();
        let manifest = req.manifest;
        let base_dir = req.base_dir;
        let prepared = tokio::task::spawn_blocking(move || prepare(manifest, &base_dir, &out_root)).await;
        let prepared = match prepared {
            Ok(Ok(p)) => p,
            failure => {
                state.release(&run_id, previous);
                return Err(match failure {
                    Err(join) => ApiError::internal(join),
                    Ok(Err(e)) => ApiError::bad_request(e),
                    Ok(Ok(_)) => unreachable!(),
                });
            }
        };
        status.store_dir = prepared.store.dir().to_path_buf();
        state.set_status(status.clone());
        start_execution(state.clone(), prepared, status.clone(), &req.workers, req.max_jobs);
    }
    Ok((StatusCode::ACCEPTED, Json(status)))
}

fn start_execution(
    state: Arc<AppState>,
    prepared: mcqa_core::runner::Prepared,
    status: RunStatus,
    workers: &Option<usize>,
    max_jobs: Option<usize>,
) {
    let options = ExecuteOptions {
        workers: workers.unwrap_or(DEFAULT_WORKERS),
        max_jobs,
    };
    let task_state = state;
    let mut done = status;
    tokio::spawn(async move {
        let result = execute(&prepared.harness, &prepared.plan, &prepared.store, &options).await;
        match result.map_err(|e| e.to_string()).and_then(|summary| {
            prepared.write_scores().map(|_| summary).map_err(|e| e.to_string())
        }) {
            Ok(summary) => {
                tracing::info!(run = %done.run_id, ?summary, "run finished");
                done.state = RunState::Finished;
                done.summary = Some(summary);
            }
            Err(e) => {
                tracing::error!(run = %done.run_id, error = %e, "run failed");
                done.state = RunState::Failed;
                done.error = Some(e);
            }
        }
        task_state.set_status(done);
    });
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<RunStatus>> {
    Json(state.runs.lock().expect("run table lock").values().cloned().collect())
}

fn lookup(state: &AppState, id: &str) -> Result<RunStatus, ApiError> {
    state
        .runs
        .lock()
        .expect("run table lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no run {id}")))
}

async fn run_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<RunStatus> {
    lookup(&state, &id).map(Json)
}

async fn run_scores(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<ScoreFile> {
    let status = lookup(&state, &id)?;
    if status.state == RunState::Running {
        return Err(ApiError::conflict(format!("run {id} is still running")));
    }
    let path = status.store_dir.join(SCORES_FILE);
    let text = tokio::fs::read_to_string(&path)
        .await
        .map_err(|e| ApiError::not_found(format!("{}: {e}", path.display())))?;
    ScoreFile::from_json(&text).map(Json).map_err(ApiError::internal)
}
