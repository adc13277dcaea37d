//! Worker agent: polls for experiments, runs each script in a fresh
//! workspace, relays its records, and reports the outcome.
//!
//! Exactly one `report_result` is sent per attempt that reached
//! `report_started`, whatever the script does. A shutdown request is
//! honoured between experiments only.

mod relay;
mod workspace;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::{ExitStatus, Stdio};
use std::time::{Duration, Instant};

use maci_core::model::{LogLevel, WorkerId};
use maci_core::orchestrator::{Assignment, LogInput, Outcome};
use tokio::process::Command;
use tokio::sync::watch;

use crate::client::{ApiClient, ClientError};
pub use relay::{Record, Relay, BUFFER_CAPACITY};
pub use workspace::{Workspace, PARAMS_FILE, SCRIPT_FILE};

/// Time reserved between the script timeout and lease expiry for the
/// agent to flush records and report.
pub const TIMEOUT_GRACE: Duration = Duration::from_secs(30);
const TERM_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub labels: BTreeSet<String>,
    pub poll_interval: Duration,
    pub heartbeat_interval: Duration,
    pub retain_workspaces: bool,
    pub data_dir: PathBuf,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080".into(),
            token: None,
            labels: BTreeSet::new(),
            poll_interval: Duration::from_secs(2),
            heartbeat_interval: Duration::from_secs(10),
            retain_workspaces: false,
            data_dir: PathBuf::from("maci-worker-data"),
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutionOutcome {
    /// Exit code, or 128 + signal number when killed by a signal; -1 when
    /// the script never ran.
    pub exit_code: i32,
    pub duration_ms: u64,
    /// Set only when the agent terminated the script.
    pub timed_out: bool,
}

impl ExecutionOutcome {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }
}

/// Exponential backoff from `initial`, doubling up to `max`.
#[derive(Debug, Clone)]
pub struct Backoff {
    initial: Duration,
    max: Duration,
    next: Duration,
}

impl Backoff {
    pub fn new(initial: Duration, max: Duration) -> Self {
        Self { initial, max, next: initial }
    }

    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(self.max);
        d
    }

    pub fn reset(&mut self) {
        self.next = self.initial;
    }
}

/// Sleeps for `d` unless shutdown is requested first; returns true on
/// shutdown.
async fn sleep_or_shutdown(d: Duration, shutdown: &mut watch::Receiver<bool>) -> bool {
    if *shutdown.borrow() {
        return true;
    }
    tokio::select! {
        _ = tokio::time::sleep(d) => *shutdown.borrow(),
        r = shutdown.changed() => r.is_err() || *shutdown.borrow(),
    }
}

pub struct Agent {
    config: AgentConfig,
    client: ApiClient,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Self {
        let client = ApiClient::new(&config.endpoint, config.token.clone());
        Self { config, client }
    }

    async fn register(&self, backoff: &mut Backoff, shutdown: &mut watch::Receiver<bool>) -> Option<WorkerId> {
        loop {
            match self.client.register_worker(self.config.labels.clone()).await {
                Ok(info) => {
                    tracing::info!(worker = %info.id, "registered");
                    backoff.reset();
                    return Some(info.id);
                }
                Err(e) => {
                    let d = backoff.next_delay();
                    tracing::warn!(error = %e, retry_in = ?d, "registration failed");
                    if sleep_or_shutdown(d, shutdown).await {
                        return None;
                    }
                }
            }
        }
    }

    /// Polls and executes until `shutdown` turns true. Orchestrator outages
    /// are ridden out with backoff. Returns the number of experiments run.
    pub async fn run_loop(&self, mut shutdown: watch::Receiver<bool>) -> usize {
        let mut backoff = Backoff::new(self.config.backoff_initial, self.config.backoff_max);
        let Some(mut worker) = self.register(&mut backoff, &mut shutdown).await else {
            return 0;
        };
        let mut executed = 0;
        while !*shutdown.borrow() {
            let polled = match self.client.heartbeat(&worker).await {
                Ok(_) => self.client.acquire_next(&worker).await,
                Err(e) => Err(e),
            };
            match polled {
                Ok(Some(assignment)) => {
                    backoff.reset();
                    self.execute_one(&worker, assignment).await;
                    executed += 1;
                }
                Ok(None) => {
                    backoff.reset();
                    if sleep_or_shutdown(self.config.poll_interval, &mut shutdown).await {
                        break;
                    }
                }
                Err(e) if e.code() == Some("unknown_worker") => {
                    tracing::warn!(%worker, "orchestrator forgot this worker; re-registering");
                    match self.register(&mut backoff, &mut shutdown).await {
                        Some(w) => worker = w,
                        None => break,
                    }
                }
                Err(e) => {
                    let d = backoff.next_delay();
                    tracing::warn!(error = %e, retry_in = ?d, "poll failed");
                    if sleep_or_shutdown(d, &mut shutdown).await {
                        break;
                    }
                }
            }
        }
        tracing::info!(%worker, executed, "agent stopped");
        executed
    }

    /// Retries a lease-guarded call on transient failures until `deadline`.
    async fn retry<T, F, Fut>(&self, deadline: Instant, mut f: F) -> Result<T, ClientError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, ClientError>>,
    {
        let mut backoff = Backoff::new(Duration::from_millis(200), Duration::from_secs(5));
        loop {
            match f().await {
                Err(e) if e.is_transient() && Instant::now() < deadline => {
                    tracing::warn!(error = %e, "orchestrator unreachable; retrying");
                    tokio::time::sleep(backoff.next_delay().min(deadline.saturating_duration_since(Instant::now()))).await;
                }
                other => return other,
            }
        }
    }

    /// Runs one leased experiment to completion and reports it.
    pub async fn execute_one(&self, worker: &WorkerId, a: Assignment) -> ExecutionOutcome {
        let received = Instant::now();
        let experiment = a.instance.id.clone();
        let lease_len = (a.lease.expires_at - a.lease.granted_at).to_std().unwrap_or_default();
        let lease_deadline = received + lease_len;
        let timeout = lease_len.saturating_sub(TIMEOUT_GRACE).max(Duration::from_secs(1));
        let not_run = |ms: u64| ExecutionOutcome { exit_code: -1, duration_ms: ms, timed_out: false };

        let ws_name = format!("{}.a{}", experiment, a.lease.attempt);
        let workspace = match Workspace::create(&self.config.data_dir.join("workspaces"), &ws_name, &a.parameters, &a.script) {
            Ok(ws) => ws,
            Err(e) => {
                let detail = format!("workspace setup failed: {e}");
                tracing::error!(%experiment, %detail);
                self.finish(worker, &experiment, lease_deadline, Outcome::Failure { detail }).await;
                return not_run(0);
            }
        };
        let relay = match Relay::start(self.client.clone(), experiment.clone(), a.parameters.params.keys().cloned(), lease_deadline).await {
            Ok(r) => r,
            Err(e) => {
                let detail = format!("ingestion endpoint failed: {e}");
                self.finish(worker, &experiment, lease_deadline, Outcome::Failure { detail }).await;
                self.discard(workspace);
                return not_run(0);
            }
        };

        if let Err(e) = self.retry(lease_deadline, || self.client.report_started(&experiment, worker)).await {
            tracing::error!(%experiment, error = %e, "could not report start; abandoning attempt");
            relay.flush().await;
            self.discard(workspace);
            return not_run(0);
        }

        let heartbeat = {
            let client = self.client.clone();
            let worker = worker.clone();
            let every = self.config.heartbeat_interval;
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                tick.tick().await;
                loop {
                    tick.tick().await;
                    if let Err(e) = client.heartbeat(&worker).await {
                        tracing::warn!(error = %e, "heartbeat failed");
                    }
                }
            })
        };

        let mut cmd = Command::new(workspace.script_file());
        cmd.current_dir(&workspace.root)
            .env("MACI_EXPERIMENT_ID", experiment.as_str())
            .env("MACI_SEED", a.parameters.seed.to_string())
            .env("MACI_PARAMS_FILE", workspace.parameters_file())
            .env("MACI_REPORT_URL", relay.url());
        for (name, value) in &a.parameters.params {
            cmd.env(format!("MACI_PARAM_{name}"), value.canonical_text());
        }
        let (outcome, detail) = run_script(cmd, &workspace, timeout).await;
        tracing::info!(%experiment, ?outcome, "script ended");

        if !outcome.succeeded() {
            let tail = workspace.stderr_tail(20);
            if !tail.is_empty() {
                relay.push(Record::Log(LogInput {
                    level: LogLevel::Error,
                    message: format!("stderr tail:\n{tail}"),
                    wall_offset_ms: Some(outcome.duration_ms),
                }));
            }
        }
        relay.flush().await;
        let result = match detail {
            None => Outcome::Success,
            Some(detail) => Outcome::Failure { detail },
        };
        self.finish(worker, &experiment, lease_deadline, result).await;
        heartbeat.abort();
        self.discard(workspace);
        outcome
    }

    async fn finish(&self, worker: &WorkerId, experiment: &maci_core::model::ExperimentId, deadline: Instant, outcome: Outcome) {
        match self.retry(deadline, || self.client.report_result(experiment, worker, outcome.clone())).await {
            Ok(status) => tracing::info!(%experiment, ?status, "result reported"),
            // A retried request whose first copy was applied.
            Err(e) if e.code() == Some("already_terminal") => {}
            Err(e) => tracing::error!(%experiment, error = %e, "result not accepted"),
        }
    }

    fn discard(&self, workspace: Workspace) {
        if !self.config.retain_workspaces {
            workspace.cleanup();
        }
    }
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

fn kill_group(pgid: i32, signal: i32) {
    // The child leads its own group, so pgid == pid.
    unsafe {
        libc::killpg(pgid, signal);
    }
}

/// Spawns `cmd` in its own process group and waits at most `timeout`.
/// Returns the outcome and a failure detail (`None` on success).
async fn run_script(mut cmd: Command, workspace: &Workspace, timeout: Duration) -> (ExecutionOutcome, Option<String>) {
    let started = Instant::now();
    let elapsed = || started.elapsed().as_millis() as u64;
    let files = std::fs::File::create(workspace.stdout_file()).and_then(|out| Ok((out, std::fs::File::create(workspace.stderr_file())?)));
    let (stdout, stderr) = match files {
        Ok(f) => f,
        Err(e) => {
            let o = ExecutionOutcome { exit_code: -1, duration_ms: elapsed(), timed_out: false };
            return (o, Some(format!("spawn failed: {e}")));
        }
    };
    cmd.stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .process_group(0)
        .kill_on_drop(true);

    // A concurrent fork elsewhere in the process can briefly hold the
    // freshly written script open, making exec fail with ETXTBSY.
    let mut spawned = cmd.spawn();
    for _ in 0..20 {
        match &spawned {
            Err(e) if e.raw_os_error() == Some(libc::ETXTBSY) => {
                tokio::time::sleep(Duration::from_millis(50)).await;
                spawned = cmd.spawn();
            }
            _ => break,
        }
    }
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => {
            let o = ExecutionOutcome { exit_code: -1, duration_ms: elapsed(), timed_out: false };
            return (o, Some(format!("spawn failed: {e}")));
        }
    };
    let pgid = child.id().map(|p| p as i32);

    let (status, timed_out) = tokio::select! {
        s = child.wait() => (s, false),
        _ = tokio::time::sleep(timeout) => {
            if let Some(g) = pgid {
                kill_group(g, libc::SIGTERM);
            }
            let s = match tokio::time::timeout(TERM_GRACE, child.wait()).await {
                Ok(s) => s,
                Err(_) => {
                    if let Some(g) = pgid {
                        kill_group(g, libc::SIGKILL);
                    }
                    child.wait().await
                }
            };
            (s, true)
        }
    };
    // Helpers the script left behind must not outlive the attempt.
    if let Some(g) = pgid {
        kill_group(g, libc::SIGKILL);
    }
    let code = match status {
        Ok(s) => exit_code(s),
        Err(e) => {
            let o = ExecutionOutcome { exit_code: -1, duration_ms: elapsed(), timed_out };
            return (o, Some(format!("wait failed: {e}")));
        }
    };
    let outcome = ExecutionOutcome { exit_code: code, duration_ms: elapsed(), timed_out };
    let detail = if timed_out {
        Some(format!("timed_out after {}s", timeout.as_secs()))
    } else if code != 0 {
        Some(format!("exit_code={code}"))
    } else {
        None
    };
    (outcome, detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = Backoff::new(Duration::from_secs(1), Duration::from_secs(60));
        let seq: Vec<u64> = (0..8).map(|_| b.next_delay().as_secs()).collect();
        assert_eq!(seq, [1, 2, 4, 8, 16, 32, 60, 60]);
        b.reset();
        assert_eq!(b.next_delay(), Duration::from_secs(1));
    }

    #[test]
    fn success_requires_clean_exit() {
        let ok = ExecutionOutcome { exit_code: 0, duration_ms: 1, timed_out: false };
        assert!(ok.succeeded());
        assert!(!ExecutionOutcome { timed_out: true, ..ok }.succeeded());
        assert!(!ExecutionOutcome { exit_code: 3, ..ok }.succeeded());
    }
}
