//! Typed async client for the `/api/v1` surface.

use std::collections::BTreeSet;
use std::time::Duration;

use maci_core::analysis::{CubeQuery, ExportFormat, GroupSummary, ParetoPoint, ParetoQuery};
use maci_core::model::*;
use maci_core::orchestrator::{
    Assignment, ExperimentBundle, LogInput, MetricInput, NewStudy, NewTemplate, Outcome,
    StudyProgress, WorkerInfo,
};
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{ApiError, RegisterBody, ResultBody, StartedBody, PREFIX};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error body.
    #[error("{0}")]
    Api(ApiError),
    /// The request never produced a response.
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api(e) => Some(&e.code),
            _ => None,
        }
    }

    /// True when retrying the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Api(e) => e.status >= 500,
            ClientError::Protocol(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct ApiClient {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl ApiClient {
    /// `endpoint` is the service root, e.g. `http://host:8080`.
    pub fn new(endpoint: &str, token: Option<String>) -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client builds");
        Self {
            base: format!("{}{PREFIX}", endpoint.trim_end_matches('/')),
            token,
            http,
        }
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let rb = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn send(&self, rb: RequestBuilder) -> Result<reqwest::Response> {
        let resp = rb.send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let bytes = resp.bytes().await?;
        Err(match serde_json::from_slice::<ApiError>(&bytes) {
            Ok(e) => ClientError::Api(e),
            Err(_) => ClientError::Protocol(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes)
            )),
        })
    }

    async fn json<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T> {
        let resp = self.send(rb).await?;
        let bytes = resp.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.json(self.request(Method::GET, path)).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.json(self.request(Method::POST, path).json(body)).await
    }

    pub async fn health(&self) -> Result<serde_json::Value> {
        self.get("/health").await
    }

    pub async fn create_template(&self, t: &NewTemplate) -> Result<StudyTemplate> {
        self.post("/templates", t).await
    }

    pub async fn templates(&self) -> Result<Vec<StudyTemplate>> {
        self.get("/templates").await
    }

    pub async fn template(&self, id: &TemplateId) -> Result<StudyTemplate> {
        self.get(&format!("/templates/{id}")).await
    }

    pub async fn create_study(&self, s: &NewStudy) -> Result<Study> {
        self.post("/studies", s).await
    }

    pub async fn studies(&self) -> Result<Vec<Study>> {
        self.get("/studies").await
    }

    pub async fn study(&self, id: &StudyId) -> Result<Study> {
        self.get(&format!("/studies/{id}")).await
    }

    pub async fn start_study(&self, id: &StudyId) -> Result<StudyProgress> {
        self.post(&format!("/studies/{id}/start"), &serde_json::json!({})).await
    }

    pub async fn cancel_study(&self, id: &StudyId) -> Result<StudyProgress> {
        self.post(&format!("/studies/{id}/cancel"), &serde_json::json!({})).await
    }

    pub async fn progress(&self, id: &StudyId) -> Result<StudyProgress> {
        self.get(&format!("/studies/{id}/progress")).await
    }

    pub async fn experiments(&self, id: &StudyId) -> Result<Vec<ExperimentInstance>> {
        self.get(&format!("/studies/{id}/experiments")).await
    }

    pub async fn export(&self, id: &StudyId, format: ExportFormat, include_failed: bool) -> Result<Vec<u8>> {
        let format = match format {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        };
        let path = format!("/studies/{id}/export?format={format}&include_failed={include_failed}");
        let resp = self.send(self.request(Method::GET, &path)).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn frame(&self, id: &StudyId) -> Result<Vec<u8>> {
        let resp = self.send(self.request(Method::GET, &format!("/studies/{id}/frame"))).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn register_worker(&self, labels: BTreeSet<String>) -> Result<WorkerInfo> {
        self.post("/workers", &RegisterBody { labels }).await
    }

    pub async fn workers(&self) -> Result<Vec<WorkerInfo>> {
        self.get("/workers").await
    }

    pub async fn heartbeat(&self, id: &WorkerId) -> Result<WorkerInfo> {
        self.post(&format!("/workers/{id}/heartbeat"), &serde_json::json!({})).await
    }

    pub async fn acquire_next(&self, id: &WorkerId) -> Result<Option<Assignment>> {
        let rb = self.request(Method::POST, &format!("/workers/{id}/next")).json(&serde_json::json!({}));
        let resp = self.send(rb).await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        let bytes = resp.bytes().await?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub async fn report_started(&self, experiment: &ExperimentId, worker: &WorkerId) -> Result<()> {
        let body = StartedBody { worker_id: worker.clone() };
        self.send(self.request(Method::POST, &format!("/experiments/{experiment}/started")).json(&body))
            .await?;
        Ok(())
    }

    pub async fn report_result(
        &self,
        experiment: &ExperimentId,
        worker: &WorkerId,
        outcome: Outcome,
    ) -> Result<ExperimentStatus> {
        #[derive(serde::Deserialize)]
        struct Reply {
            status: ExperimentStatus,
        }
        let body = ResultBody { worker_id: worker.clone(), outcome };
        let reply: Reply = self.post(&format!("/experiments/{experiment}/result"), &body).await?;
        Ok(reply.status)
    }

    pub async fn ingest_metrics(&self, experiment: &ExperimentId, records: &[MetricInput]) -> Result<Vec<MetricRecord>> {
        self.post(&format!("/experiments/{experiment}/metrics"), records).await
    }

    pub async fn ingest_logs(&self, experiment: &ExperimentId, records: &[LogInput]) -> Result<usize> {
        #[derive(serde::Deserialize)]
        struct Reply {
            accepted: usize,
        }
        let reply: Reply = self.post(&format!("/experiments/{experiment}/logs"), records).await?;
        Ok(reply.accepted)
    }

    pub async fn drill_down(&self, experiment: &ExperimentId) -> Result<ExperimentBundle> {
        self.get(&format!("/experiments/{experiment}")).await
    }

    pub async fn cube(&self, query: &CubeQuery) -> Result<Vec<GroupSummary>> {
        self.post("/analysis/cube", query).await
    }

    pub async fn pareto(&self, query: &ParetoQuery) -> Result<Vec<ParetoPoint>> {
        self.post("/analysis/pareto", query).await
    }
}
