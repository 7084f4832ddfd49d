use std::path::PathBuf;

use clap::Parser;

use magicmix_core::io::shapes::ShapesDataset;
use magicmix_core::par::Execution;
use magicmix_service::registry::{LoadedModel, Registry};
use magicmix_service::{build, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "magicmix-service", version, about = "HTTP job service for semantic mixing")]
struct Args {
    /// `name=path/to/model.ckpt`; repeatable, the first is the default.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// `name=path/to/dataset`; repeatable.
    #[arg(long = "dataset")]
    datasets: Vec<String>,
    /// Holds persisted jobs and uploads.
    #[arg(long, default_value = "service-data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Concurrently running jobs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Jobs allowed to wait in the queue.
    #[arg(long, default_value_t = 16)]
    queue: usize,
    #[arg(long)]
    sequential: bool,
}

fn split(spec: &str) -> Result<(String, PathBuf), String> {
    spec.split_once('=')
        .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
        .ok_or_else(|| format!("expected name=path, got `{spec}`"))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Err(e) = run(args) {
        eprintln!("{}", serde_json::json!({"error": {"message": e}}));
        std::process::exit(1);
    }
}

fn run(args: Args) -> Result<(), String> {
    let mut models = Vec::new();
    for m in &args.models {
        let (name, path) = split(m)?;
        models.push(LoadedModel::load(&name, &path).map_err(|e| e.to_string())?);
    }
    let mut datasets = Vec::new();
    for d in &args.datasets {
        let (name, path) = split(d)?;
        datasets.push((name, ShapesDataset::load(&path).map_err(|e| e.to_string())?));
    }
    let registry = Registry::new(models, datasets, args.data_dir.join("uploads")).map_err(|e| e.to_string())?;
    let config = ServiceConfig {
        data_dir: args.data_dir,
        workers: args.workers,
        queue_capacity: args.queue,
        exec: if args.sequential { Execution::Sequential } else { Execution::Auto },
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let (app, _) = build(registry, config).map_err(|e| e.to_string())?;
        let listener = tokio::net::TcpListener::bind(&args.addr).await.map_err(|e| e.to_string())?;
        log::info!("listening on {}", args.addr);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}
