use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use maci_core::orchestrator::OrchestratorError;
use maci_core::ValidationError;
use serde::{Deserialize, Serialize};

/// Body of every 4xx/5xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
    /// Per-field problems for `validation` errors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<ValidationError>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    pub fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }
}

fn status_for(err: &OrchestratorError) -> StatusCode {
    use OrchestratorError::*;
    match err {
        UnknownTemplate(_) | UnknownStudy(_) | UnknownWorker(_) | UnknownExperiment(_) => {
            StatusCode::NOT_FOUND
        }
        Validation(_) | Analysis(_) => StatusCode::UNPROCESSABLE_ENTITY,
        InvalidArgument(_) => StatusCode::BAD_REQUEST,
        WrongState(_) | WorkerBusy(_) | WorkerOffline(_) | LeaseMismatch { .. } | LeaseExpired(_)
        | AlreadyTerminal(_) | TerminalState(_) => StatusCode::CONFLICT,
        Poisoned => StatusCode::SERVICE_UNAVAILABLE,
        SchemaMismatch { .. } | CorruptLog { .. } | Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(err: OrchestratorError) -> Self {
        let mut api = ApiError::new(status_for(&err), err.code(), err.to_string());
        if let OrchestratorError::Validation(v) = err {
            api.details = v.0;
        }
        api
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}
