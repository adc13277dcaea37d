use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use maci::executor::{Agent, AgentConfig};
use tokio::sync::watch;

/// MACI worker agent.
#[derive(Debug, Parser)]
#[command(name = "maci-worker", version)]
struct Args {
    #[arg(long, env = "MACI_ENDPOINT")]
    endpoint: String,
    #[arg(long, env = "MACI_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Comma-separated worker labels.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Seconds between polls when no work is queued.
    #[arg(long, default_value_t = 2.0)]
    poll_interval: f64,
    #[arg(long, default_value_t = 10.0)]
    heartbeat_interval: f64,
    /// Keep each experiment's workspace after reporting.
    #[arg(long)]
    retain_workspaces: bool,
    #[arg(long, default_value = "maci-worker-data")]
    data_dir: PathBuf,
}

fn seconds(v: f64, flag: &str) -> Duration {
    Duration::try_from_secs_f64(v).ok().filter(|d| !d.is_zero()).unwrap_or_else(|| {
        eprintln!("maci-worker: {flag} must be a positive number of seconds");
        std::process::exit(64);
    })
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let config = AgentConfig {
        endpoint: args.endpoint,
        token: args.token,
        labels: args.labels.into_iter().filter(|l| !l.is_empty()).collect(),
        poll_interval: seconds(args.poll_interval, "--poll-interval"),
        heartbeat_interval: seconds(args.heartbeat_interval, "--heartbeat-interval"),
        retain_workspaces: args.retain_workspaces,
        data_dir: args.data_dir,
        ..AgentConfig::default()
    };
    let (tx, rx) = watch::channel(false);
    tokio::spawn(async move {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
        tracing::info!("shutdown requested; finishing current experiment");
        let _ = tx.send(true);
    });
    Agent::new(config).run_loop(rx).await;
}
