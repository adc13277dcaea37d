use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use maci::api::{serve, ServerConfig};
use maci_core::orchestrator::RetryPolicy;

/// MACI orchestration service.
#[derive(Debug, Parser)]
#[command(name = "maci-server", version)]
struct Args {
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "maci-data")]
    data_dir: PathBuf,
    /// JSON file mapping scopes (admin, worker, analysis) to token lists.
    #[arg(long)]
    tokens_file: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    lease_duration_s: u64,
    #[arg(long, default_value_t = 2)]
    max_attempts: u32,
    #[arg(long, default_value_t = 10)]
    heartbeat_interval_s: u64,
    /// Silence after which a worker counts as offline.
    #[arg(long, default_value_t = 30)]
    offline_threshold_s: u64,
}

async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
    tracing::info!("shutting down");
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let config = ServerConfig {
        host: args.host,
        port: args.port,
        data_dir: args.data_dir,
        tokens_file: args.tokens_file,
        policy: RetryPolicy {
            max_attempts: args.max_attempts,
            lease_duration_s: args.lease_duration_s,
            heartbeat_interval_s: args.heartbeat_interval_s,
            offline_threshold_s: args.offline_threshold_s,
        },
        reap_interval: Duration::from_secs(1),
    };
    if let Err(e) = serve(config, shutdown_signal()).await {
        eprintln!("maci-server: {e:#}");
        std::process::exit(1);
    }
}
