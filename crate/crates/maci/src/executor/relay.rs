//! Local ingestion endpoint and the forwarder that relays its records.
//!
//! Records accepted on `POST /metric` and `POST /log` enter a bounded FIFO
//! buffer. The forwarder drains it in order, in batches of one record kind,
//! and only drops a record once the orchestrator has acknowledged it or
//! rejected it as invalid.

use std::collections::{BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use maci_core::analysis::RESERVED_COLUMNS;
use maci_core::model::{is_identifier, ExperimentId, LogLevel};
use maci_core::orchestrator::{LogInput, MetricInput};
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Notify};
use tokio::task::JoinHandle;

use crate::client::ApiClient;

pub const BUFFER_CAPACITY: usize = 10_000;
const BATCH: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Metric(MetricInput),
    Log(LogInput),
}

#[derive(Default)]
struct Buffer {
    records: VecDeque<Record>,
    closed: bool,
}

struct Shared {
    buffer: Mutex<Buffer>,
    notify: Notify,
    capacity: usize,
    started: Instant,
    /// Names a metric may not take: parameters and reserved columns.
    taken: BTreeSet<String>,
}

impl Shared {
    fn push(&self, record: Record) -> Result<(), (StatusCode, String)> {
        let mut buf = self.buffer.lock().unwrap();
        if buf.closed {
            return Err((StatusCode::SERVICE_UNAVAILABLE, "experiment has ended".into()));
        }
        if buf.records.len() >= self.capacity {
            return Err((StatusCode::SERVICE_UNAVAILABLE, "relay buffer full".into()));
        }
        buf.records.push_back(record);
        drop(buf);
        self.notify.notify_one();
        Ok(())
    }

    fn offset_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricBody {
    metric: String,
    value: f64,
    #[serde(default)]
    wall_offset_ms: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogBody {
    level: LogLevel,
    message: String,
    #[serde(default)]
    wall_offset_ms: Option<u64>,
}

type Reply = Result<StatusCode, (StatusCode, String)>;

/// Refuses a record and notes the refusal in the experiment's log.
fn reject(s: &Shared, what: &str, reason: String) -> (StatusCode, String) {
    tracing::warn!(%reason, "rejected {what} record");
    let _ = s.push(Record::Log(LogInput {
        level: LogLevel::Warn,
        message: format!("rejected {what} record: {reason}"),
        wall_offset_ms: Some(s.offset_ms()),
    }));
    (StatusCode::BAD_REQUEST, reason)
}

async fn post_metric(State(s): State<Arc<Shared>>, body: Result<Json<MetricBody>, JsonRejection>) -> Reply {
    let Json(m) = body.map_err(|e| reject(&s, "metric", e.body_text()))?;
    if !is_identifier(&m.metric) {
        return Err(reject(&s, "metric", format!("{:?} is not a valid metric name", m.metric)));
    }
    if s.taken.contains(&m.metric) {
        return Err(reject(&s, "metric", format!("{:?} collides with a column name", m.metric)));
    }
    if !m.value.is_finite() {
        return Err(reject(&s, "metric", format!("value of {} is not finite", m.metric)));
    }
    s.push(Record::Metric(MetricInput {
        metric: m.metric,
        value: m.value,
        wall_offset_ms: Some(m.wall_offset_ms.unwrap_or_else(|| s.offset_ms())),
    }))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_log(State(s): State<Arc<Shared>>, body: Result<Json<LogBody>, JsonRejection>) -> Reply {
    let Json(l) = body.map_err(|e| reject(&s, "log", e.body_text()))?;
    s.push(Record::Log(LogInput {
        level: l.level,
        message: l.message,
        wall_offset_ms: Some(l.wall_offset_ms.unwrap_or_else(|| s.offset_ms())),
    }))?;
    Ok(StatusCode::NO_CONTENT)
}

/// A running relay for one experiment attempt.
pub struct Relay {
    shared: Arc<Shared>,
    addr: SocketAddr,
    server: Option<(oneshot::Sender<()>, JoinHandle<()>)>,
    forwarder: JoinHandle<usize>,
}

impl Relay {
    /// Binds the endpoint on loopback and starts forwarding to `client`.
    /// Forwarding gives up on records still unsent at `deadline`.
    pub async fn start(
        client: ApiClient,
        experiment: ExperimentId,
        parameters: impl IntoIterator<Item = String>,
        deadline: Instant,
    ) -> std::io::Result<Relay> {
        Self::with_capacity(client, experiment, parameters, deadline, BUFFER_CAPACITY).await
    }

    pub async fn with_capacity(
        client: ApiClient,
        experiment: ExperimentId,
        parameters: impl IntoIterator<Item = String>,
        deadline: Instant,
        capacity: usize,
    ) -> std::io::Result<Relay> {
        let mut taken: BTreeSet<String> = parameters.into_iter().collect();
        taken.extend(RESERVED_COLUMNS.iter().map(|s| s.to_string()));
        let shared = Arc::new(Shared {
            buffer: Mutex::new(Buffer::default()),
            notify: Notify::new(),
            capacity,
            started: Instant::now(),
            taken,
        });
        let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
        let addr = listener.local_addr()?;
        let app = Router::new()
            .route("/metric", post(post_metric))
            .route("/log", post(post_log))
            .with_state(shared.clone());
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            let shutdown = async {
                let _ = stop_rx.await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                tracing::error!(error = %e, "ingestion endpoint failed");
            }
        });
        let forwarder = tokio::spawn(forward(shared.clone(), client, experiment, deadline));
        Ok(Relay { shared, addr, server: Some((stop_tx, server)), forwarder })
    }

    /// Value for `MACI_REPORT_URL`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Queues a record from the agent itself.
    pub fn push(&self, record: Record) {
        if let Err((_, reason)) = self.shared.push(record) {
            tracing::warn!(%reason, "dropping agent record");
        }
    }

    /// Stops accepting records; later posts get 503.
    pub async fn stop_accepting(&mut self) {
        if let Some((stop, server)) = self.server.take() {
            let _ = stop.send(());
            let _ = server.await;
        }
    }

    /// Stops the endpoint and waits until every buffered record has been
    /// delivered or the deadline passes. Returns the number delivered.
    pub async fn flush(mut self) -> usize {
        self.stop_accepting().await;
        self.shared.buffer.lock().unwrap().closed = true;
        self.shared.notify.notify_one();
        self.forwarder.await.unwrap_or(0)
    }
}

fn take_batch(shared: &Shared) -> Option<Vec<Record>> {
    let buf = shared.buffer.lock().unwrap();
    let first = buf.records.front()?;
    let metric = matches!(first, Record::Metric(_));
    Some(
        buf.records
            .iter()
            .take_while(|r| matches!(r, Record::Metric(_)) == metric)
            .take(BATCH)
            .cloned()
            .collect(),
    )
}

async fn send(client: &ApiClient, experiment: &ExperimentId, batch: &[Record]) -> crate::client::Result<()> {
    match batch.first() {
        Some(Record::Metric(_)) => {
            let ms: Vec<MetricInput> = batch
                .iter()
                .filter_map(|r| match r {
                    Record::Metric(m) => Some(m.clone()),
                    _ => None,
                })
                .collect();
            client.ingest_metrics(experiment, &ms).await.map(drop)
        }
        Some(Record::Log(_)) => {
            let ls: Vec<LogInput> = batch
                .iter()
                .filter_map(|r| match r {
                    Record::Log(l) => Some(l.clone()),
                    _ => None,
                })
                .collect();
            client.ingest_logs(experiment, &ls).await.map(drop)
        }
        None => Ok(()),
    }
}

async fn forward(shared: Arc<Shared>, client: ApiClient, experiment: ExperimentId, deadline: Instant) -> usize {
    let mut delivered = 0usize;
    let mut backoff = Duration::from_millis(100);
    loop {
        let Some(batch) = take_batch(&shared) else {
            if shared.buffer.lock().unwrap().closed {
                return delivered;
            }
            shared.notify.notified().await;
            continue;
        };
        if Instant::now() >= deadline {
            let dropped = shared.buffer.lock().unwrap().records.len();
            tracing::error!(%experiment, dropped, "lease deadline passed with records unsent");
            return delivered;
        }
        match send(&client, &experiment, &batch).await {
            Ok(()) => {
                shared.buffer.lock().unwrap().records.drain(..batch.len());
                delivered += batch.len();
                backoff = Duration::from_millis(100);
            }
            Err(e) if e.is_transient() => {
                tracing::debug!(error = %e, "relay delivery failed; retrying");
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(Duration::from_secs(2));
            }
            Err(e) if batch.len() > 1 => {
                // Isolate the offending record: resend one by one.
                tracing::warn!(error = %e, "batch rejected; retrying records individually");
                let mut sent = 0;
                for record in &batch {
                    loop {
                        match send(&client, &experiment, std::slice::from_ref(record)).await {
                            Ok(()) => {
                                sent += 1;
                                break;
                            }
                            Err(e) if e.is_transient() && Instant::now() < deadline => {
                                tokio::time::sleep(backoff).await;
                            }
                            Err(e) => {
                                tracing::warn!(error = %e, ?record, "record rejected by orchestrator");
                                break;
                            }
                        }
                    }
                }
                shared.buffer.lock().unwrap().records.drain(..batch.len());
                delivered += sent;
            }
            Err(e) => {
                tracing::warn!(error = %e, record = ?batch[0], "record rejected by orchestrator");
                shared.buffer.lock().unwrap().records.pop_front();
            }
        }
    }
}
