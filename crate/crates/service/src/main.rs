use std::path::PathBuf;

use clap::Parser;
use reform_core::config::Config;

/// Serves encoding, attribute editing and catalog search over HTTP.
/// Listens on $PORT (default 8080).
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Directory holding the trained checkpoints.
    #[arg(long, default_value = "models")]
    models_dir: PathBuf,
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let port = reform_service::port_from_env().map_err(anyhow::Error::msg)?;
    reform_service::run(&args.models_dir, &cfg, port).await
}
