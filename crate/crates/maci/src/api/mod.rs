//! HTTP facade over the orchestrator and analysis engine, served under
//! `/api/v1`.

mod auth;
mod error;
pub mod handlers;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::routing::{get, post};
use axum::{middleware, Router};
use maci_core::orchestrator::{Orchestrator, RetryPolicy, SystemClock};
use tokio::net::TcpListener;

pub use auth::{Scope, Tokens};
pub use error::ApiError;
pub use handlers::{RegisterBody, ResultBody, StartedBody};

pub const PREFIX: &str = "/api/v1";

/// One route of the public API and the operation it exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub method: &'static str,
    pub path: &'static str,
    pub operation: &'static str,
    pub scope: Option<Scope>,
}

const fn ep(method: &'static str, path: &'static str, operation: &'static str, scope: Option<Scope>) -> Endpoint {
    Endpoint { method, path, operation, scope }
}

use Scope::{Admin, Analysis, Worker};

/// Every route served under [`PREFIX`]; `scope` is `None` for open routes.
pub const ENDPOINTS: &[Endpoint] = &[
    ep("GET", "/health", "health", None),
    ep("POST", "/templates", "create_template", Some(Admin)),
    ep("GET", "/templates", "list_templates", Some(Analysis)),
    ep("GET", "/templates/{id}", "get_template", Some(Analysis)),
    ep("POST", "/studies", "create_study", Some(Admin)),
    ep("GET", "/studies", "list_studies", Some(Analysis)),
    ep("GET", "/studies/{id}", "get_study", Some(Analysis)),
    ep("POST", "/studies/{id}/start", "start_study", Some(Admin)),
    ep("POST", "/studies/{id}/cancel", "cancel_study", Some(Admin)),
    ep("GET", "/studies/{id}/progress", "progress", Some(Analysis)),
    ep("GET", "/studies/{id}/experiments", "list_experiments", Some(Analysis)),
    ep("GET", "/studies/{id}/export", "export_frame", Some(Analysis)),
    ep("GET", "/studies/{id}/frame", "build_frame", Some(Analysis)),
    ep("POST", "/workers", "register_worker", Some(Worker)),
    ep("GET", "/workers", "list_workers", Some(Analysis)),
    ep("POST", "/workers/{id}/heartbeat", "heartbeat", Some(Worker)),
    ep("POST", "/workers/{id}/next", "acquire_next", Some(Worker)),
    ep("POST", "/experiments/{id}/started", "report_started", Some(Worker)),
    ep("POST", "/experiments/{id}/result", "report_result", Some(Worker)),
    ep("POST", "/experiments/{id}/metrics", "ingest_metrics", Some(Worker)),
    ep("POST", "/experiments/{id}/logs", "ingest_logs", Some(Worker)),
    ep("GET", "/experiments/{id}", "drill_down", Some(Analysis)),
    ep("POST", "/analysis/cube", "cube", Some(Analysis)),
    ep("POST", "/analysis/pareto", "pareto", Some(Analysis)),
];

/// Builds the full application router.
pub fn router(orch: Arc<Orchestrator>, tokens: Tokens) -> Router {
    use handlers::*;
    let tokens = Arc::new(tokens);
    let guard = |scope: Scope| middleware::from_fn_with_state((tokens.clone(), scope), auth::require);

    let admin = Router::new()
        .route("/templates", post(create_template))
        .route("/studies", post(create_study))
        .route("/studies/{id}/start", post(start_study))
        .route("/studies/{id}/cancel", post(cancel_study))
        .route_layer(guard(Admin));
    let analysis = Router::new()
        .route("/templates", get(list_templates))
        .route("/templates/{id}", get(get_template))
        .route("/studies", get(list_studies))
        .route("/studies/{id}", get(get_study))
        .route("/studies/{id}/progress", get(progress))
        .route("/studies/{id}/experiments", get(experiments))
        .route("/studies/{id}/export", get(export))
        .route("/studies/{id}/frame", get(frame))
        .route("/workers", get(list_workers))
        .route("/experiments/{id}", get(drill_down))
        .route("/analysis/cube", post(cube))
        .route("/analysis/pareto", post(pareto))
        .route_layer(guard(Analysis));
    let worker = Router::new()
        .route("/workers", post(register_worker))
        .route("/workers/{id}/heartbeat", post(heartbeat))
        .route("/workers/{id}/next", post(acquire_next))
        .route("/experiments/{id}/started", post(report_started))
        .route("/experiments/{id}/result", post(report_result))
        .route("/experiments/{id}/metrics", post(ingest_metrics))
        .route("/experiments/{id}/logs", post(ingest_logs))
        .route_layer(guard(Worker));

    let v1 = Router::new()
        .route("/health", get(health))
        .merge(admin)
        .merge(analysis)
        .merge(worker)
        .method_not_allowed_fallback(method_not_allowed);
    Router::new()
        .nest(PREFIX, v1)
        .fallback(not_found)
        .with_state(orch)
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub tokens_file: Option<PathBuf>,
    pub policy: RetryPolicy,
    pub reap_interval: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "0.0.0.0".into(),
            port: 8080,
            data_dir: PathBuf::from("maci-data"),
            tokens_file: None,
            policy: RetryPolicy::default(),
            reap_interval: Duration::from_secs(1),
        }
    }
}

/// Periodically reclaims expired leases and silent workers.
pub async fn reaper(orch: Arc<Orchestrator>, every: Duration) {
    let mut tick = tokio::time::interval(every);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        let o = orch.clone();
        match tokio::task::spawn_blocking(move || o.reap(o.now())).await {
            Ok(Ok(actions)) if !actions.is_empty() => tracing::info!(?actions, "reaped"),
            Ok(Ok(_)) => {}
            Ok(Err(e)) => tracing::error!(error = %e, "reap failed"),
            Err(e) => tracing::error!(error = %e, "reaper task panicked"),
        }
    }
}

/// Serves `orch` on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: TcpListener,
    orch: Arc<Orchestrator>,
    tokens: Tokens,
    reap_interval: Duration,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let reaper = tokio::spawn(reaper(orch.clone(), reap_interval));
    let result = axum::serve(listener, router(orch, tokens))
        .with_graceful_shutdown(shutdown)
        .await;
    reaper.abort();
    result
}

/// Opens the store under `config.data_dir` and binds the listener. Fails on
/// a schema version mismatch or an unusable data directory.
pub async fn bind(config: &ServerConfig) -> anyhow::Result<(TcpListener, Arc<Orchestrator>, Tokens)> {
    config.policy.validate().map_err(|e| anyhow::anyhow!("invalid retry policy: {e}"))?;
    let tokens = match &config.tokens_file {
        Some(path) => Tokens::load(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?,
        None => Tokens::default(),
    };
    let orch = Orchestrator::open(&config.data_dir, config.policy.clone(), Arc::new(SystemClock))
        .map_err(|e| anyhow::anyhow!("opening data directory {}: {e}", config.data_dir.display()))?;
    let listener = TcpListener::bind((config.host.as_str(), config.port)).await?;
    Ok((listener, Arc::new(orch), tokens))
}

pub async fn serve(config: ServerConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
    let (listener, orch, tokens) = bind(&config).await?;
    let addr: SocketAddr = listener.local_addr()?;
    if tokens.is_open() {
        tracing::warn!("no tokens configured; API is open");
    }
    tracing::info!(%addr, data_dir = %config.data_dir.display(), "serving");
    serve_on(listener, orch, tokens, config.reap_interval, shutdown).await?;
    Ok(())
}
