use std::path::PathBuf;

use clap::Parser;
use incseg_service::{app, ServiceConfig};

/// Serve the incremental segmentation session API.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML configuration file. INCSEG_PORT, INCSEG_CHECKPOINT_DIR and
    /// INCSEG_WORKERS override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match ServiceConfig::load(args.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    let addr = format!("{}:{}", config.host, config.port);
    log::info!(
        "checkpoints from {}, {} worker(s)",
        config.checkpoint_dir.display(),
        config.workers
    );
    let (_, router) = app(config);
    let listener = match tokio::net::TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {addr}: {e}");
            std::process::exit(1);
        }
    };
    log::info!("listening on {addr}");
    if let Err(e) = axum::serve(listener, router).await {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
