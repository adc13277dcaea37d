use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::{FromRequest, FromRequestParts, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use maci_core::analysis::{build_frame, CubeQuery, ExportFormat, ParetoQuery, ReducerMap};
use maci_core::model::{ExperimentId, StudyId, TemplateId, WorkerId};
use maci_core::orchestrator::{
    LogInput, MetricInput, NewStudy, NewTemplate, Orchestrator, Outcome, Result as OrchResult,
};
use serde::{Deserialize, Serialize};

use super::error::ApiError;

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct Json<T>(pub T);

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
pub struct Query<T>(pub T);

pub type Shared = Arc<Orchestrator>;
type ApiResult<T> = Result<T, ApiError>;

/// Runs an orchestrator call off the async executor; calls may fsync.
async fn call<T, F>(orch: &Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Orchestrator) -> OrchResult<T> + Send + 'static,
{
    let orch = orch.clone();
    tokio::task::spawn_blocking(move || f(&orch))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::from)
}

pub async fn health() -> axum::Json<serde_json::Value> {
    axum::Json(serde_json::json!({"status": "ok"}))
}

pub async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "route_not_found", "no such route")
}

pub async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
}

// Templates

pub async fn create_template(State(o): State<Shared>, Json(body): Json<NewTemplate>) -> ApiResult<impl IntoResponse> {
    let t = call(&o, move |o| o.create_template(body)).await?;
    Ok((StatusCode::CREATED, Json(t)))
}

pub async fn list_templates(State(o): State<Shared>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, |o| o.templates()).await?))
}

pub async fn get_template(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.template(&TemplateId(id))).await?))
}

// Studies

pub async fn create_study(State(o): State<Shared>, Json(body): Json<NewStudy>) -> ApiResult<impl IntoResponse> {
    let s = call(&o, move |o| o.create_study(body)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

pub async fn list_studies(State(o): State<Shared>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, |o| o.studies()).await?))
}

pub async fn get_study(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.study(&StudyId(id))).await?))
}

pub async fn start_study(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.start_study(&StudyId(id))).await?))
}

pub async fn cancel_study(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.cancel_study(&StudyId(id))).await?))
}

pub async fn progress(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.progress(&StudyId(id))).await?))
}

pub async fn experiments(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.experiments(&StudyId(id))).await?))
}

#[derive(Debug, Default, Deserialize)]
pub struct FrameParams {
    pub format: Option<String>,
    #[serde(default)]
    pub include_failed: bool,
}

fn frame_bytes(o: &Orchestrator, id: StudyId, include_failed: bool, f: impl FnOnce(&maci_core::analysis::ResultFrame) -> Vec<u8>) -> OrchResult<Vec<u8>> {
    let data = o.study_data(&id)?;
    let frame = build_frame(&data, &ReducerMap::new(), include_failed)?;
    Ok(f(&frame))
}

pub async fn export(
    State(o): State<Shared>,
    Path(id): Path<String>,
    Query(params): Query<FrameParams>,
) -> ApiResult<Response> {
    let format: ExportFormat = params
        .format
        .as_deref()
        .unwrap_or("csv")
        .parse()
        .map_err(|e: maci_core::analysis::AnalysisError| ApiError::bad_request(e.to_string()))?;
    let bytes = call(&o, move |o| frame_bytes(o, StudyId(id), params.include_failed, |f| f.export(format))).await?;
    let content_type = match format {
        ExportFormat::Csv => "text/csv; charset=utf-8",
        ExportFormat::Jsonl => "application/x-ndjson",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

pub async fn frame(
    State(o): State<Shared>,
    Path(id): Path<String>,
    Query(params): Query<FrameParams>,
) -> ApiResult<Response> {
    let bytes = call(&o, move |o| frame_bytes(o, StudyId(id), params.include_failed, |f| f.to_jsonl(true))).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
}

// Workers

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RegisterBody {
    #[serde(default)]
    pub labels: BTreeSet<String>,
}

pub async fn register_worker(State(o): State<Shared>, Json(body): Json<RegisterBody>) -> ApiResult<impl IntoResponse> {
    let w = call(&o, move |o| o.register_worker(body.labels)).await?;
    Ok((StatusCode::CREATED, Json(w)))
}

pub async fn list_workers(State(o): State<Shared>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, |o| o.workers()).await?))
}

pub async fn heartbeat(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.heartbeat(&WorkerId(id))).await?))
}

/// 200 with an assignment, or 204 when nothing is queued.
pub async fn acquire_next(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(match call(&o, move |o| o.acquire_next(&WorkerId(id))).await? {
        Some(a) => Json(a).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

// Experiments

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartedBody {
    pub worker_id: WorkerId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBody {
    pub worker_id: WorkerId,
    #[serde(flatten)]
    pub outcome: Outcome,
}

pub async fn report_started(
    State(o): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<StartedBody>,
) -> ApiResult<StatusCode> {
    call(&o, move |o| o.report_started(&ExperimentId(id), &body.worker_id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

pub async fn report_result(
    State(o): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<ResultBody>,
) -> ApiResult<impl IntoResponse> {
    let status = call(&o, move |o| o.report_result(&ExperimentId(id), &body.worker_id, body.outcome)).await?;
    Ok(Json(serde_json::json!({"status": status})))
}

pub async fn ingest_metrics(
    State(o): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<Vec<MetricInput>>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.ingest_metrics(&ExperimentId(id), body)).await?))
}

pub async fn ingest_logs(
    State(o): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<Vec<LogInput>>,
) -> ApiResult<impl IntoResponse> {
    let n = call(&o, move |o| o.ingest_logs(&ExperimentId(id), body)).await?;
    Ok(Json(serde_json::json!({"accepted": n})))
}

pub async fn drill_down(State(o): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.drill_down(&ExperimentId(id))).await?))
}

// Analysis

pub async fn cube(State(o): State<Shared>, Json(q): Json<CubeQuery>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.cube(&q)).await?))
}

pub async fn pareto(State(o): State<Shared>, Json(q): Json<ParetoQuery>) -> ApiResult<impl IntoResponse> {
    Ok(Json(call(&o, move |o| o.pareto(&q)).await?))
}
