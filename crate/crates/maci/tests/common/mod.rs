#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use maci::api::{serve_on, Tokens};
use maci_core::model::*;
use maci_core::orchestrator::{NewStudy, NewTemplate, Orchestrator, RetryPolicy, SystemClock};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub struct TestServer {
    pub url: String,
    pub addr: SocketAddr,
    pub orch: Arc<Orchestrator>,
    tokens: Tokens,
    running: Option<(oneshot::Sender<()>, JoinHandle<()>)>,
}

impl TestServer {
    pub async fn start(policy: RetryPolicy) -> TestServer {
        Self::with(Arc::new(Orchestrator::in_memory(policy, Arc::new(SystemClock))), Tokens::default()).await
    }

    pub async fn with(orch: Arc<Orchestrator>, tokens: Tokens) -> TestServer {
        let listener = TcpListener::bind(("127.0.0.1", 0)).await.unwrap();
        let addr = listener.local_addr().unwrap();
        let mut s = TestServer { url: format!("http://{addr}"), addr, orch, tokens, running: None };
        s.launch(listener);
        s
    }

    fn launch(&mut self, listener: TcpListener) {
        let (tx, rx) = oneshot::channel::<()>();
        let orch = self.orch.clone();
        let tokens = self.tokens.clone();
        let handle = tokio::spawn(async move {
            serve_on(listener, orch, tokens, Duration::from_millis(200), async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        self.running = Some((tx, handle));
    }

    /// Takes the service offline; the orchestrator state survives.
    pub async fn stop(&mut self) {
        if let Some((tx, handle)) = self.running.take() {
            let _ = tx.send(());
            let _ = tokio::time::timeout(Duration::from_secs(5), handle).await;
        }
    }

    pub async fn restart(&mut self) {
        let listener = TcpListener::bind(self.addr).await.unwrap();
        self.launch(listener);
    }

    pub fn api(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.url)
    }
}

pub fn num(v: f64) -> ParamValue {
    ParamValue::number(v).unwrap()
}

pub fn policy(lease_s: u64) -> RetryPolicy {
    RetryPolicy { lease_duration_s: lease_s, ..RetryPolicy::default() }
}

/// A one-parameter template running `script`.
pub fn template(script: &str, values: usize) -> NewTemplate {
    NewTemplate {
        name: "t".into(),
        script: script.into(),
        parameters: vec![ParameterDefinition::new(
            "x",
            ParameterKind::Configuration,
            (0..values).map(|v| num(v as f64)).collect(),
        )],
        declared_metrics: vec![MetricDeclaration { name: "m".into(), direction: Direction::Maximize, unit: None }],
    }
}

pub fn started_study(orch: &Orchestrator, t: NewTemplate, repetitions: u32) -> Study {
    let t = orch.create_template(t).unwrap();
    let s = orch
        .create_study(NewStudy {
            template_id: t.id,
            bound_values: Default::default(),
            repetitions,
            base_seed: 9,
            provenance: Default::default(),
        })
        .unwrap();
    orch.start_study(&s.id).unwrap();
    s
}

/// Polls `cond` every 50 ms until it holds or `limit` passes.
pub async fn wait_for(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = tokio::time::Instant::now() + limit;
    while tokio::time::Instant::now() < deadline {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    cond()
}
