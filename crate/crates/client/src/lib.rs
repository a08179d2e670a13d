//! Typed client for the harness service.

use std::time::Duration;

use mcqa_core::api::*;
use mcqa_core::runner::ScoreFile;
use mcqa_core::scoring::{AggregateScore, CellScore};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid server URL {0:?}")]
    BadUrl(String),
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Api { status: u16, message: String },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let base = base_url.trim_end_matches('/').to_string();
        reqwest::Url::parse(&base).map_err(|_| ClientError::BadUrl(base_url.to_string()))?;
        Ok(Self {
            base,
            http: reqwest::Client::new(),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json_error(&text).unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::decode(resp).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ClientError> {
        self.post("/v1/ingest", req).await
    }

    pub async fn transform(&self, req: &TransformRequest) -> Result<TransformResponse, ClientError> {
        self.post("/v1/transform", req).await
    }

    pub async fn parse(&self, req: &ParseRequest) -> Result<ParseResponse, ClientError> {
        self.post("/v1/parse", req).await
    }

    pub async fn render(&self, req: &RenderRequest) -> Result<RenderResponse, ClientError> {
        self.post("/v1/render", req).await
    }

    pub async fn score_cell(&self, req: &ScoreCellRequest) -> Result<CellScore, ClientError> {
        self.post("/v1/score/cell", req).await
    }

    pub async fn aggregate(&self, req: &AggregateRequest) -> Result<AggregateScore, ClientError> {
        self.post("/v1/aggregate", req).await
    }

    pub async fn delta(&self, req: &DeltaRequest) -> Result<DeltaResponse, ClientError> {
        self.post("/v1/delta", req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<ReportResponse, ClientError> {
        self.post("/v1/report", req).await
    }

    pub async fn start_run(&self, req: &RunRequest) -> Result<RunStatus, ClientError> {
        self.post("/v1/runs", req).await
    }

    pub async fn runs(&self) -> Result<Vec<RunStatus>, ClientError> {
        self.get("/v1/runs").await
    }

    pub async fn run_status(&self, run_id: &str) -> Result<RunStatus, ClientError> {
        self.get(&format!("/v1/runs/{run_id}")).await
    }

    pub async fn run_scores(&self, run_id: &str) -> Result<ScoreFile, ClientError> {
        self.get(&format!("/v1/runs/{run_id}/scores")).await
    }

    /// Polls until the run leaves the running state.
    pub async fn wait_for_run(&self, run_id: &str, poll: Duration) -> Result<RunStatus, ClientError> {
        loop {
            let status = self.run_status(run_id).await?;
            if status.state != RunState::Running {
                return Ok(status);
            }
            tokio::time::sleep(poll).await;
        }
    }
}

fn serde_json_error(text: &str) -> Option<String> {
    let body: ErrorBody = serde_json::from_str(text).ok()?;
    Some(body.error)
}
